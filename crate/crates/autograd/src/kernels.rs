//! Raw tensor kernels. No graph bookkeeping happens here.

use crate::tensor::{numel, Shape, Tensor};

pub fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn contiguous_strides(shape: Shape) -> [usize; 4] {
    [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ]
}

/// Strides for reading `shape` while iterating `out`; broadcast dims get stride 0.
fn broadcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let s = contiguous_strides(shape);
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { s[d] };
    }
    r
}

pub fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(sa, sb)
        .unwrap_or_else(|| panic!("shapes {sa:?} and {sb:?} do not broadcast"));
    if b.len() == 1 && sa == out {
        let y = b.data()[0];
        return a.map(|x| f(x, y));
    }
    if a.len() == 1 && sb == out {
        let x = a.data()[0];
        return b.map(|y| f(x, y));
    }
    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(&out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let oa = n * ta[0] + c * ta[1] + h * ta[2];
                let ob = n * tb[0] + c * tb[1] + h * tb[2];
                let w = out[3];
                match (ta[3], tb[3]) {
                    (1, 1) => data.extend(da[oa..oa + w].iter().zip(&db[ob..ob + w]).map(|(&x, &y)| f(x, y))),
                    (1, 0) => {
                        let y = db[ob];
                        data.extend(da[oa..oa + w].iter().map(|&x| f(x, y)));
                    }
                    (0, 1) => {
                        let x = da[oa];
                        data.extend(db[ob..ob + w].iter().map(|&y| f(x, y)));
                    }
                    (sa3, sb3) => {
                        for j in 0..w {
                            data.push(f(da[oa + j * sa3], db[ob + j * sb3]));
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sum over every dim where `target` is 1 but `x` is not. Accumulates in f64.
pub fn sum_to(x: &Tensor, target: Shape) -> Tensor {
    let s = x.shape();
    if s == target {
        return x.clone();
    }
    for d in 0..4 {
        assert!(
            target[d] == s[d] || target[d] == 1,
            "cannot reduce {s:?} to {target:?}"
        );
    }
    let t = broadcast_strides(target, s);
    let mut acc = vec![0f64; numel(&target)];
    let data = x.data();
    let mut i = 0;
    for n in 0..s[0] {
        for c in 0..s[1] {
            for h in 0..s[2] {
                let base = n * t[0] + c * t[1] + h * t[2];
                let row = &data[i..i + s[3]];
                if t[3] == 0 {
                    acc[base] += row.iter().map(|&v| v as f64).sum::<f64>();
                } else {
                    for (a, &v) in acc[base..base + s[3]].iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                i += s[3];
            }
        }
    }
    Tensor::from_vec(target, acc.into_iter().map(|v| v as f32).collect())
}

pub fn expand(x: &Tensor, target: Shape) -> Tensor {
    if x.shape() == target {
        return x.clone();
    }
    binary(x, &Tensor::zeros(target), |a, _| a)
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &d[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            let r0 = &p[2 * i * w..(2 * i + 1) * w];
            let r1 = &p[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..wo {
                out.push(((r0[2 * j] + r0[2 * j + 1]) + (r1[2 * j] + r1[2 * j + 1])) * 0.25);
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out)
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * 2, w * 2);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &d[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            let row = &p[(i / 2) * w..(i / 2 + 1) * w];
            for j in 0..wo {
                out.push(row[j / 2]);
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat needs matching batch and spatial dims");
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], out)
}

pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(start + len <= c, "channel range {start}+{len} exceeds {c}");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for i in 0..n {
        let s = x.sample(i);
        out.extend_from_slice(&s[start * hw..(start + len) * hw]);
    }
    Tensor::from_vec([n, len, h, w], out)
}

/// Zero-pad along channels so that `x` occupies `[start, start + C)` of `total`.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(start + c <= total);
    let hw = h * w;
    let mut out = vec![0f32; n * total * hw];
    for i in 0..n {
        let dst = &mut out[(i * total + start) * hw..(i * total + start + c) * hw];
        dst.copy_from_slice(x.sample(i));
    }
    Tensor::from_vec([n, total, h, w], out)
}

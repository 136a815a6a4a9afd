//! Straight-line reference codec built on dense matrices and plain loops.
//! Deliberately self-contained: nothing from the library is used here.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

pub struct OracleOutput {
    pub widths: Vec<u8>,
    pub ranges: Vec<(f64, f64)>,
    pub codes: Vec<Vec<u32>>,
    pub gamma: f32,
    pub reconstruction: Vec<f32>,
}

/// Plan levels as `(bits, ratio in tenths)`, descending bits.
pub type TenthsPlan<'a> = &'a [(u8, u64)];

/// Largest-remainder counts with exact integer arithmetic on tenths.
pub fn counts_from_tenths(plan: TenthsPlan, m: usize) -> Vec<usize> {
    let m = m as u64;
    let mut counts: Vec<u64> = plan.iter().map(|&(_, t)| t * m / 10).collect();
    let rems: Vec<u64> = plan.iter().map(|&(_, t)| t * m % 10).collect();
    let mut left = m - counts.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..plan.len()).collect();
    // Larger remainder first; on ties the earlier (wider) level wins.
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let mut i = 0;
    while left > 0 {
        counts[order[i % order.len()]] += 1;
        left -= 1;
        i += 1;
    }
    counts.into_iter().map(|c| c as usize).collect()
}

fn dct_matrix(p: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; p]; p];
    let pf = p as f64;
    for k in 0..p {
        let scale = if k == 0 { (1.0 / pf).sqrt() } else { (2.0 / pf).sqrt() };
        for n in 0..p {
            c[k][n] = scale * (PI * (2 * n + 1) as f64 * k as f64 / (2.0 * pf)).cos();
        }
    }
    c
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            t[j][i] = a[i][j];
        }
    }
    t
}

fn f32_below(y: f32) -> f32 {
    if y == 0.0 {
        -f32::from_bits(1)
    } else if y > 0.0 {
        f32::from_bits(y.to_bits() - 1)
    } else {
        f32::from_bits(y.to_bits() + 1)
    }
}

fn f32_above(y: f32) -> f32 {
    if y == 0.0 {
        f32::from_bits(1)
    } else if y > 0.0 {
        f32::from_bits(y.to_bits() + 1)
    } else {
        f32::from_bits(y.to_bits() - 1)
    }
}

fn floor_f32(x: f64) -> f64 {
    let y = x as f32;
    f64::from(if f64::from(y) > x { f32_below(y) } else { y })
}

fn ceil_f32(x: f64) -> f64 {
    let y = x as f32;
    f64::from(if f64::from(y) < x { f32_above(y) } else { y })
}

/// Reference compression of a row-major `rows x cols` delta with float32
/// ranges. `dct_mean` selects the coefficient-mean rule for 0-bit patches.
pub fn compress(delta: &[f32], rows: usize, cols: usize, p: usize, plan: TenthsPlan, dct_mean: bool) -> OracleOutput {
    // Zero-padded dense copy.
    let gr = rows.div_ceil(p);
    let gc = cols.div_ceil(p);
    let mut padded = vec![vec![0.0f64; gc * p]; gr * p];
    for r in 0..rows {
        for c in 0..cols {
            padded[r][c] = f64::from(delta[r * cols + c]);
        }
    }

    // Patches in raster order.
    let mut patches: Vec<Vec<Vec<f64>>> = Vec::new();
    for pr in 0..gr {
        for pc in 0..gc {
            let mut x = vec![vec![0.0; p]; p];
            for i in 0..p {
                for j in 0..p {
                    x[i][j] = padded[pr * p + i][pc * p + j];
                }
            }
            patches.push(x);
        }
    }
    let m = patches.len();

    // L2 scores.
    let mut scores = vec![0.0f64; m];
    for k in 0..m {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += patches[k][i][j] * patches[k][i][j];
            }
        }
        scores[k] = s.sqrt();
    }

    // Rank by score, ties by index, and hand out widths level by level.
    let counts = counts_from_tenths(plan, m);
    let mut rank: Vec<usize> = (0..m).collect();
    rank.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut widths = vec![0u8; m];
    let mut pos = 0;
    for (lvl, &(bits, _)) in plan.iter().enumerate() {
        for _ in 0..counts[lvl] {
            widths[rank[pos]] = bits;
            pos += 1;
        }
    }

    let c = dct_matrix(p);
    let ct = transpose(&c);
    let mut ranges = Vec::with_capacity(m);
    let mut codes = Vec::with_capacity(m);
    let mut recon_patches = Vec::with_capacity(m);
    for k in 0..m {
        let bits = widths[k];
        let x = &patches[k];
        if bits == 0 && !dct_mean {
            let mut s = 0.0;
            for i in 0..p {
                for j in 0..p {
                    s += x[i][j];
                }
            }
            let mean = f64::from((s / (p * p) as f64) as f32);
            ranges.push((mean, mean));
            codes.push(Vec::new());
            recon_patches.push(vec![vec![mean; p]; p]);
            continue;
        }
        // Y = C X Cᵀ
        let y = matmul(&matmul(&c, x), &ct);
        let (lo, hi, q, deq);
        if bits == 0 {
            let mut s = 0.0;
            for i in 0..p {
                for j in 0..p {
                    s += y[i][j];
                }
            }
            let mean = f64::from((s / (p * p) as f64) as f32);
            lo = mean;
            hi = mean;
            q = Vec::new();
            deq = vec![vec![mean; p]; p];
        } else {
            let mut mn = f64::INFINITY;
            let mut mx = f64::NEG_INFINITY;
            for row in &y {
                for &v in row {
                    mn = mn.min(v);
                    mx = mx.max(v);
                }
            }
            let mut qq = Vec::with_capacity(p * p);
            let mut dd = vec![vec![0.0; p]; p];
            if mn == mx {
                let v = f64::from(mn as f32);
                lo = v;
                hi = v;
                qq.resize(p * p, 0);
                for row in dd.iter_mut() {
                    for e in row.iter_mut() {
                        *e = v;
                    }
                }
            } else {
                lo = floor_f32(mn);
                hi = ceil_f32(mx);
                let top = if bits == 32 { u32::MAX as f64 } else { ((1u64 << bits) - 1) as f64 };
                let step = (hi - lo) / top;
                for i in 0..p {
                    for j in 0..p {
                        let mut code = ((y[i][j] - lo) / step + 0.5).floor();
                        if code < 0.0 {
                            code = 0.0;
                        }
                        if code > top {
                            code = top;
                        }
                        qq.push(code as u32);
                        dd[i][j] = lo + code * step;
                    }
                }
            }
            q = qq;
            deq = dd;
        }
        ranges.push((lo, hi));
        codes.push(q);
        // X' = Cᵀ Y' C
        recon_patches.push(matmul(&matmul(&ct, &deq), &c));
    }

    // Reassemble, crop, narrow to f32.
    let mut recon = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for col in 0..cols {
            let k = (r / p) * gc + col / p;
            recon[r * cols + col] = recon_patches[k][r % p][col % p] as f32;
        }
    }

    // γ = Σ|ΔW| / Σ|ΔW'|
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..rows * cols {
        num += f64::from(delta[i].abs());
        den += f64::from(recon[i].abs());
    }
    let mut gamma = 1.0f32;
    if num != 0.0 && den != 0.0 {
        let g = (num / den) as f32;
        if g.is_finite() && g > 0.0 {
            gamma = g;
        }
    }
    let reconstruction = recon.iter().map(|v| v * gamma).collect();
    OracleOutput {
        widths,
        ranges,
        codes,
        gamma,
        reconstruction,
    }
}

/// Reference sign codec: `α·sign(ΔW)` with `α = mean|ΔW|`.
pub fn sign_reconstruction(delta: &[f32]) -> Vec<f32> {
    let mut s = 0.0f64;
    for v in delta {
        s += f64::from(v.abs());
    }
    let alpha = (s / delta.len() as f64) as f32;
    delta.iter().map(|&v| if v > 0.0 { alpha } else { -alpha }).collect()
}

/// `‖a − b‖_F / ‖a‖_F`.
pub fn frobenius_rel_error(a: &[f32], b: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..a.len() {
        let d = f64::from(a[i]) - f64::from(b[i]);
        num += d * d;
        den += f64::from(a[i]) * f64::from(a[i]);
    }
    (num / den).sqrt()
}

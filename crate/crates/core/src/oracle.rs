//! Plain-loop reference implementations on nested `Vec<f64>`. Slow on
//! purpose: no tensor ops, every sum written out.

pub type Mat = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + 1e-8) * (norm(b) + 1e-8))
}

fn gauss(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for i in 0..a.len() {
        d2 += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// The three 1/B² double sums of the biased estimator.
pub fn mmd(gw: &Mat, gn: &Mat, sigma: f64) -> f64 {
    let b = gw.len() as f64;
    let (mut kww, mut knn, mut kwn) = (0.0, 0.0, 0.0);
    for i in 0..gw.len() {
        for j in 0..gw.len() {
            kww += gauss(&gw[i], &gw[j], sigma);
        }
    }
    for i in 0..gn.len() {
        for j in 0..gn.len() {
            knn += gauss(&gn[i], &gn[j], sigma);
        }
    }
    for i in 0..gw.len() {
        for j in 0..gn.len() {
            kwn += gauss(&gw[i], &gn[j], sigma);
        }
    }
    kww / (b * b) + knn / (b * b) - 2.0 * kwn / (b * b)
}

/// f is (N, F) for one sample.
pub fn token_mean(f: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; f[0].len()];
    for row in f {
        for k in 0..row.len() {
            out[k] += row[k];
        }
    }
    for v in &mut out {
        *v /= f.len() as f64;
    }
    out
}

/// Softmax over tokens of w·f_n + bias, then the weighted sum.
pub fn attention_pool(f: &Mat, w: &[f64], bias: f64) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = f.iter().map(|row| dot(row, w) + bias).collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in &scores {
        z += (s - mx).exp();
    }
    let att: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
    let mut out = vec![0.0; f[0].len()];
    for (n, row) in f.iter().enumerate() {
        for k in 0..row.len() {
            out[k] += att[n] * row[k];
        }
    }
    (out, att)
}

pub fn align(ws: &Mat, ns: &Mat) -> f64 {
    let mut s = 0.0;
    for b in 0..ws.len() {
        s += cosine(&ws[b], &ns[b]);
    }
    0.5 * (1.0 - s / ws.len() as f64)
}

pub fn diff(wp: &Mat, np: &Mat) -> f64 {
    let mut s = 0.0;
    for b in 0..wp.len() {
        s += cosine(&wp[b], &np[b]);
    }
    0.5 * (1.0 + s / wp.len() as f64)
}

pub fn orth(ws: &Mat, wp: &Mat, ns: &Mat, np: &Mat) -> f64 {
    let mut s = 0.0;
    for b in 0..ws.len() {
        s += cosine(&ws[b], &wp[b]).powi(2) + cosine(&ns[b], &np[b]).powi(2);
    }
    s / (2.0 * ws.len() as f64)
}

fn dacl_anchor(anchor: &Mat, pos: &Mat, neg1: &Mat, neg2: &Mat, tau: f64) -> f64 {
    let bsz = anchor.len();
    let mut total = 0.0;
    for b in 0..bsz {
        let s_pos = (cosine(&anchor[b], &pos[b]) / tau).exp();
        let mut s_den = 0.0;
        for m in 0..bsz {
            s_den += (cosine(&anchor[b], &pos[m]) / tau).exp();
            s_den += (cosine(&anchor[b], &neg1[m]) / tau).exp();
            s_den += (cosine(&anchor[b], &neg2[m]) / tau).exp();
        }
        total += -(s_pos / s_den).ln();
    }
    total / bsz as f64
}

pub fn dacl(ws: &Mat, wp: &Mat, ns: &Mat, np: &Mat, tau: f64, symmetric: bool) -> f64 {
    let w = dacl_anchor(ws, ns, wp, np, tau);
    if symmetric {
        0.5 * (w + dacl_anchor(ns, ws, np, wp, tau))
    } else {
        w
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fd(ws: &Mat, wp: &Mat, ns: &Mat, np: &Mat, w: [f64; 4], tau: f64) -> f64 {
    w[0] * align(ws, ns) + w[1] * diff(wp, np) + w[2] * orth(ws, wp, ns, np) + w[3] * dacl(ws, wp, ns, np, tau, false)
}

/// logits[b][c][y][x] with two channels, mask[b][y][x] in {0,1}.
pub fn seg_losses(logits: &[[Mat; 2]], mask: &[Vec<Vec<u8>>], smooth: f64) -> (f64, f64) {
    let mut ce = 0.0;
    let mut count = 0.0;
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for b in 0..logits.len() {
        for y in 0..mask[b].len() {
            for x in 0..mask[b][y].len() {
                let l0 = logits[b][0][y][x];
                let l1 = logits[b][1][y][x];
                let mx = l0.max(l1);
                let lse = mx + ((l0 - mx).exp() + (l1 - mx).exp()).ln();
                let g = mask[b][y][x] as f64;
                let target = if mask[b][y][x] == 1 { l1 } else { l0 };
                ce += lse - target;
                count += 1.0;
                let p1 = (l1 - lse).exp();
                inter += p1 * g;
                psum += p1;
                gsum += g;
            }
        }
    }
    (ce / count, 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth))
}

pub fn lambda2(e: usize, epochs: usize, max: f64, init: f64) -> f64 {
    let ramp = e as f64 / epochs as f64 * init;
    if ramp < max {
        ramp
    } else {
        max
    }
}

/// Overlap metrics from set sizes: |P∩G|, |P∪G|, |P|, |G| and the pixel
/// count, via explicit pixel loops.
pub struct PixelSets {
    pub inter: u64,
    pub union: u64,
    pub pred: u64,
    pub gt: u64,
    pub total: u64,
}

pub fn pixel_sets(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> PixelSets {
    let mut s = PixelSets { inter: 0, union: 0, pred: 0, gt: 0, total: 0 };
    for y in 0..gt.len() {
        for x in 0..gt[y].len() {
            let p = pred[y][x] != 0;
            let g = gt[y][x] != 0;
            s.total += 1;
            if p && g {
                s.inter += 1;
            }
            if p || g {
                s.union += 1;
            }
            if p {
                s.pred += 1;
            }
            if g {
                s.gt += 1;
            }
        }
    }
    s
}

/// (iou, dice, se, gmean) from set sizes with the same degenerate-case
/// conventions as the library.
pub fn overlap_metrics(s: &PixelSets) -> (f64, f64, Option<f64>, Option<f64>) {
    if s.gt == 0 {
        return if s.pred == 0 {
            (1.0, 1.0, Some(1.0), Some(1.0))
        } else {
            (0.0, 0.0, None, None)
        };
    }
    let neg = s.total - s.gt;
    let true_neg = s.total - s.union;
    let iou = s.inter as f64 / s.union as f64;
    let dice = 2.0 * s.inter as f64 / (s.pred + s.gt) as f64;
    let se = s.inter as f64 / s.gt as f64;
    let spec = if neg == 0 { 1.0 } else { true_neg as f64 / neg as f64 };
    (iou, dice, Some(se), Some((se * spec).sqrt()))
}

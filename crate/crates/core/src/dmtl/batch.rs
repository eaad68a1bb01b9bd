//! Minibatch forward and backward passes over all member-item pairs at once.
//!
//! Every dense layer runs as one matrix product over the batch. The
//! attention pre-activation is split as `W_attn·c_u + (W_attn·c_i + b_attn)`
//! so both parts are computed once per distinct user and item.

use std::collections::HashMap;

use super::{DmtlParams, GroupData, GroupSample, LossParts};
use crate::dataio::FeatureMatrix;
use crate::numerics::{affine_into, gemm, log_sum_exp, softmax_in_place, sparse_support, Matrix};

/// Distinct entities of a batch plus the pair layout.
struct Layout {
    users: Vec<usize>,
    items: Vec<usize>,
    pair_user: Vec<usize>,
    pair_item: Vec<usize>,
    /// Pairs of sample `s` are `bounds[s]..bounds[s + 1]`.
    bounds: Vec<usize>,
    sample_item: Vec<usize>,
}

impl Layout {
    fn new<'m>(queries: impl Iterator<Item = (&'m [usize], usize)>) -> Self {
        let mut user_slot = HashMap::new();
        let mut item_slot = HashMap::new();
        let mut l = Layout {
            users: Vec::new(),
            items: Vec::new(),
            pair_user: Vec::new(),
            pair_item: Vec::new(),
            bounds: vec![0],
            sample_item: Vec::new(),
        };
        for (members, item) in queries {
            let i = *item_slot.entry(item).or_insert_with(|| {
                l.items.push(item);
                l.items.len() - 1
            });
            l.sample_item.push(i);
            for &u in members {
                let s = *user_slot.entry(u).or_insert_with(|| {
                    l.users.push(u);
                    l.users.len() - 1
                });
                l.pair_user.push(s);
                l.pair_item.push(i);
            }
            l.bounds.push(l.pair_user.len());
        }
        l
    }

    fn samples(&self) -> usize {
        self.sample_item.len()
    }

    fn pairs(&self) -> usize {
        self.pair_user.len()
    }
}

/// `relu(W·x + b)` per listed entity, rows stacked.
fn embed(w: &Matrix, b: &[f64], features: &FeatureMatrix, ids: &[usize]) -> Vec<f64> {
    let h = w.rows();
    let mut out = vec![0.0; ids.len() * h];
    for (k, &e) in ids.iter().enumerate() {
        let x = features.row(e);
        let support = sparse_support(x);
        let row = &mut out[k * h..(k + 1) * h];
        affine_into(w, x, Some(b), support.as_deref(), row);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

fn add_bias_rows(out: &mut [f64], b: &[f64]) {
    for row in out.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(o, x)| *o += x);
    }
}

fn col_sums_into(dst: &mut [f64], m: &[f64]) {
    for row in m.chunks(dst.len()) {
        dst.iter_mut().zip(row).for_each(|(d, x)| *d += x);
    }
}

/// `y = x·Wᵀ (+ b)` for row-stacked `x`.
fn linear(w: &Matrix, x: &[f64], rows: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * w.rows()];
    gemm(rows, w.cols(), w.rows(), x, false, w.as_slice(), true, &mut y, false);
    if let Some(b) = b {
        add_bias_rows(&mut y, b);
    }
    y
}

/// `dW += dyᵀ·x`, `db += Σ dy`, and `dx = dy·W` when requested.
fn linear_back(
    w: &Matrix,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    want_dx: bool,
) -> Vec<f64> {
    gemm(w.rows(), rows, w.cols(), dy, true, x, false, dw, true);
    if let Some(db) = db {
        col_sums_into(db, dy);
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; rows * w.cols()];
    gemm(rows, w.rows(), w.cols(), dy, false, w.as_slice(), false, &mut dx, false);
    dx
}

/// Entity embeddings and their `W_concat` images.
pub(super) struct EntityTerms {
    pub h_u: Vec<f64>,
    pub c_u: Vec<f64>,
    pub h_i: Vec<f64>,
    pub c_i: Vec<f64>,
}

impl EntityTerms {
    fn compute(p: &DmtlParams, users: &FeatureMatrix, items: &FeatureMatrix, l: &Layout) -> Self {
        let h_u = embed(&p.w_u, &p.b_u, users, &l.users);
        let c_u = linear(&p.w_concat, &h_u, l.users.len(), None);
        let h_i = embed(&p.w_i, &p.b_i, items, &l.items);
        let c_i = linear(&p.w_concat, &h_i, l.items.len(), Some(&p.b_concat));
        Self { h_u, c_u, h_i, c_i }
    }
}

struct Forward {
    h_attn: Vec<f64>,
    alpha: Vec<f64>,
    comb: Vec<f64>,
    z: Vec<f64>,
    zbar: Vec<f64>,
    logits: Vec<f64>,
    rating: Vec<f64>,
}

fn forward(p: &DmtlParams, t: &EntityTerms, l: &Layout) -> Forward {
    let (h1, ha, h2, c) = (p.w_u.rows(), p.w_attn.rows(), p.w_shared.rows(), p.w_profile.rows());
    let np = l.pairs();
    let ns = l.samples();
    let a_u = linear(&p.w_attn, &t.c_u, l.users.len(), None);
    let a_i = linear(&p.w_attn, &t.c_i, l.items.len(), Some(&p.b_attn));

    let mut h_attn = vec![0.0; np * ha];
    for (k, row) in h_attn.chunks_mut(ha).enumerate() {
        let au = &a_u[l.pair_user[k] * ha..][..ha];
        let ai = &a_i[l.pair_item[k] * ha..][..ha];
        for j in 0..ha {
            row[j] = (au[j] + ai[j]).max(0.0);
        }
    }
    let mut alpha = linear(&p.w_score, &h_attn, np, Some(&p.b_score));
    alpha.chunks_mut(h1).for_each(softmax_in_place);

    let mut comb = vec![0.0; np * h1];
    for (k, row) in comb.chunks_mut(h1).enumerate() {
        let hu = &t.h_u[l.pair_user[k] * h1..][..h1];
        let hi = &t.h_i[l.pair_item[k] * h1..][..h1];
        let a = &alpha[k * h1..][..h1];
        for j in 0..h1 {
            row[j] = hu[j] + a[j] * hi[j];
        }
    }
    let mut z = linear(&p.w_shared, &comb, np, Some(&p.b_shared));
    z.iter_mut().for_each(|v| *v = v.max(0.0));

    let mut zbar = vec![0.0; ns * h2];
    for (s, row) in zbar.chunks_mut(h2).enumerate() {
        let (lo, hi) = (l.bounds[s], l.bounds[s + 1]);
        for k in lo..hi {
            row.iter_mut().zip(&z[k * h2..(k + 1) * h2]).for_each(|(o, v)| *o += v);
        }
        let n = (hi - lo) as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    let logits = linear(&p.w_profile, &zbar, ns, Some(&p.b_profile));
    let rating = (0..ns)
        .map(|s| {
            let hi = &t.h_i[l.sample_item[s] * h1..][..h1];
            crate::numerics::dot(&p.w_rec, &logits[s * c..(s + 1) * c]) + crate::numerics::dot(&p.w_item, hi) + p.b_rec
        })
        .collect();
    Forward {
        h_attn,
        alpha,
        comb,
        z,
        zbar,
        logits,
        rating,
    }
}

/// Group outputs `(logits, rating)` for each `(members, item)` query.
pub(super) fn group_outputs<'m>(
    p: &DmtlParams,
    users: &FeatureMatrix,
    items: &FeatureMatrix,
    queries: impl Iterator<Item = (&'m [usize], usize)>,
) -> Vec<(Vec<f64>, f64)> {
    let l = Layout::new(queries);
    let t = EntityTerms::compute(p, users, items, &l);
    let f = forward(p, &t, &l);
    let c = p.w_profile.rows();
    f.logits.chunks(c.max(1)).map(<[f64]>::to_vec).zip(f.rating).collect()
}

/// Loss and gradients over a batch; inputs are assumed validated.
pub(super) fn loss_and_gradients(
    p: &DmtlParams,
    data: GroupData<'_>,
    batch: &[GroupSample],
    lambda: f64,
) -> (LossParts, DmtlParams) {
    let (h1, ha, h2, c) = (p.w_u.rows(), p.w_attn.rows(), p.w_shared.rows(), p.w_profile.rows());
    let l = Layout::new(batch.iter().map(|s| (&data.members[s.group][..], s.item)));
    let t = EntityTerms::compute(p, data.users, data.items, &l);
    let f = forward(p, &t, &l);
    let (np, ns) = (l.pairs(), l.samples());
    let (nu, ni) = (l.users.len(), l.items.len());
    let n = ns as f64;
    let mut g = p.zeros_like();

    // heads
    let mut rec = 0.0;
    let mut profile = 0.0;
    let mut d_logits = vec![0.0; ns * c];
    let mut d_h_i = vec![0.0; ni * h1];
    for (s, sample) in batch.iter().enumerate() {
        let err = f.rating[s] - sample.rating;
        rec += err * err;
        let dr = 2.0 * err / n;
        let logits = &f.logits[s * c..(s + 1) * c];
        let lse = log_sum_exp(logits);
        profile += lse - logits[sample.group];
        let dl = &mut d_logits[s * c..(s + 1) * c];
        for j in 0..c {
            let prob = (logits[j] - lse).exp();
            let onehot = if j == sample.group { 1.0 } else { 0.0 };
            dl[j] = dr * p.w_rec[j] + lambda / n * (prob - onehot);
            g.w_rec[j] += dr * logits[j];
        }
        let slot = l.sample_item[s];
        let hi = &t.h_i[slot * h1..][..h1];
        let dhi = &mut d_h_i[slot * h1..][..h1];
        for j in 0..h1 {
            g.w_item[j] += dr * hi[j];
            dhi[j] += dr * p.w_item[j];
        }
        g.b_rec += dr;
    }
    let (rec, profile) = (rec / n, profile / n);
    let d_zbar = linear_back(
        &p.w_profile,
        &f.zbar,
        &d_logits,
        ns,
        g.w_profile.as_mut_slice(),
        Some(&mut g.b_profile),
        true,
    );

    // shared layer
    let mut d_zpre = vec![0.0; np * h2];
    for s in 0..ns {
        let (lo, hi) = (l.bounds[s], l.bounds[s + 1]);
        let inv = 1.0 / (hi - lo) as f64;
        let dz = &d_zbar[s * h2..(s + 1) * h2];
        for k in lo..hi {
            let row = &mut d_zpre[k * h2..(k + 1) * h2];
            let z = &f.z[k * h2..(k + 1) * h2];
            for j in 0..h2 {
                row[j] = if z[j] > 0.0 { dz[j] * inv } else { 0.0 };
            }
        }
    }
    let d_comb = linear_back(
        &p.w_shared,
        &f.comb,
        &d_zpre,
        np,
        g.w_shared.as_mut_slice(),
        Some(&mut g.b_shared),
        true,
    );

    // attention
    let mut d_h_u = vec![0.0; nu * h1];
    let mut d_scores = vec![0.0; np * h1];
    for k in 0..np {
        let (us, is) = (l.pair_user[k], l.pair_item[k]);
        let dc = &d_comb[k * h1..(k + 1) * h1];
        let a = &f.alpha[k * h1..(k + 1) * h1];
        let hi = &t.h_i[is * h1..][..h1];
        d_h_u[us * h1..][..h1].iter_mut().zip(dc).for_each(|(d, x)| *d += x);
        let dhi = &mut d_h_i[is * h1..][..h1];
        let mut inner = 0.0;
        for j in 0..h1 {
            dhi[j] += dc[j] * a[j];
            inner += a[j] * dc[j] * hi[j];
        }
        let ds = &mut d_scores[k * h1..(k + 1) * h1];
        for j in 0..h1 {
            ds[j] = a[j] * (dc[j] * hi[j] - inner);
        }
    }
    let mut d_attn_pre = linear_back(
        &p.w_score,
        &f.h_attn,
        &d_scores,
        np,
        g.w_score.as_mut_slice(),
        Some(&mut g.b_score),
        true,
    );
    d_attn_pre
        .iter_mut()
        .zip(&f.h_attn)
        .for_each(|(d, h)| if *h <= 0.0 { *d = 0.0 });
    let mut d_a_u = vec![0.0; nu * ha];
    let mut d_a_i = vec![0.0; ni * ha];
    for k in 0..np {
        let d = &d_attn_pre[k * ha..(k + 1) * ha];
        d_a_u[l.pair_user[k] * ha..][..ha].iter_mut().zip(d).for_each(|(o, x)| *o += x);
        d_a_i[l.pair_item[k] * ha..][..ha].iter_mut().zip(d).for_each(|(o, x)| *o += x);
    }
    let d_c_u = linear_back(&p.w_attn, &t.c_u, &d_a_u, nu, g.w_attn.as_mut_slice(), None, true);
    let d_c_i = linear_back(
        &p.w_attn,
        &t.c_i,
        &d_a_i,
        ni,
        g.w_attn.as_mut_slice(),
        Some(&mut g.b_attn),
        true,
    );

    // concat layer and embeddings
    let du = linear_back(&p.w_concat, &t.h_u, &d_c_u, nu, g.w_concat.as_mut_slice(), None, true);
    let di = linear_back(
        &p.w_concat,
        &t.h_i,
        &d_c_i,
        ni,
        g.w_concat.as_mut_slice(),
        Some(&mut g.b_concat),
        true,
    );
    d_h_u.iter_mut().zip(du).for_each(|(d, x)| *d += x);
    d_h_i.iter_mut().zip(di).for_each(|(d, x)| *d += x);
    embed_back(&mut g.w_u, &mut g.b_u, data.users, &l.users, &t.h_u, &d_h_u);
    embed_back(&mut g.w_i, &mut g.b_i, data.items, &l.items, &t.h_i, &d_h_i);

    let parts = LossParts {
        total: rec + lambda * profile,
        rec,
        profile,
    };
    (parts, g)
}

fn embed_back(dw: &mut Matrix, db: &mut [f64], features: &FeatureMatrix, ids: &[usize], h: &[f64], dh: &[f64]) {
    let width = db.len();
    for (k, &e) in ids.iter().enumerate() {
        let x = features.row(e);
        let support = sparse_support(x);
        for r in 0..width {
            if h[k * width + r] <= 0.0 {
                continue;
            }
            let gr = dh[k * width + r];
            if gr == 0.0 {
                continue;
            }
            db[r] += gr;
            let row = dw.row_mut(r);
            match &support {
                Some(nz) => nz.iter().for_each(|&j| row[j] += gr * x[j]),
                None => row.iter_mut().zip(x).for_each(|(d, xv)| *d += gr * xv),
            }
        }
    }
}

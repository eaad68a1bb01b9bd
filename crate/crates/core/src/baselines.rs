//! Collaborative-filtering comparison models: user/item biases, four
//! neighbourhood variants, SVD, SVD++, NMF and Slope One.
//!
//! Formulations and defaults follow the Surprise library. Predictions are
//! clipped to the rating scale; `predict_raw` exposes the unclipped value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataio::RatingsTable;
use crate::error::{Error, Result};
use crate::numerics::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bias,
    KnnBasicUser,
    KnnMeansUser,
    KnnBasicItem,
    KnnMeansItem,
    Svd,
    Svdpp,
    Nmf,
    SlopeOne,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Bias,
        Variant::KnnBasicUser,
        Variant::KnnMeansUser,
        Variant::KnnBasicItem,
        Variant::KnnMeansItem,
        Variant::Svd,
        Variant::Svdpp,
        Variant::Nmf,
        Variant::SlopeOne,
    ];

    /// Machine name used in reports.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bias => "bias",
            Variant::KnnBasicUser => "knn_basic_user",
            Variant::KnnMeansUser => "knn_means_user",
            Variant::KnnBasicItem => "knn_basic_item",
            Variant::KnnMeansItem => "knn_means_item",
            Variant::Svd => "svd",
            Variant::Svdpp => "svdpp",
            Variant::Nmf => "nmf",
            Variant::SlopeOne => "slope_one",
        }
    }

    /// Display name for tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Bias => "Baseline",
            Variant::KnnBasicUser => "KNNBasic (User-Based)",
            Variant::KnnMeansUser => "KNNWithMeans (User-Based)",
            Variant::KnnBasicItem => "KNNBasic (Item-Based)",
            Variant::KnnMeansItem => "KNNWithMeans (Item-Based)",
            Variant::Svd => "SVD",
            Variant::Svdpp => "SVD++",
            Variant::Nmf => "NMF",
            Variant::SlopeOne => "Slope One",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub reg_u: f64,
    pub reg_i: f64,
    /// Alternating sweeps stop once no bias moves by more than `tol`.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            reg_u: 15.0,
            reg_i: 10.0,
            tol: 1e-12,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    pub factors: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    /// Standard deviation of the zero-mean normal factor initialization.
    pub init_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfConfig {
    pub factors: usize,
    pub epochs: usize,
    pub reg_pu: f64,
    pub reg_qi: f64,
}

/// Hyperparameters for every variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub bias: BiasConfig,
    pub knn_k: usize,
    pub svd: FactorConfig,
    pub svdpp: FactorConfig,
    pub nmf: NmfConfig,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            bias: BiasConfig::default(),
            knn_k: 40,
            svd: FactorConfig {
                factors: 100,
                epochs: 20,
                lr: 0.005,
                reg: 0.02,
                init_std: 0.1,
            },
            svdpp: FactorConfig {
                factors: 20,
                epochs: 20,
                lr: 0.007,
                reg: 0.02,
                init_std: 0.1,
            },
            nmf: NmfConfig {
                factors: 15,
                epochs: 50,
                reg_pu: 0.06,
                reg_qi: 0.06,
            },
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum State {
    Bias {
        bu: Vec<f64>,
        bi: Vec<f64>,
    },
    Knn {
        user_based: bool,
        with_means: bool,
        k: usize,
        /// Row-major similarity between entities of the neighbour kind.
        sim: Vec<f64>,
    },
    Svd {
        bu: Vec<f64>,
        bi: Vec<f64>,
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    },
    Svdpp {
        bu: Vec<f64>,
        bi: Vec<f64>,
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
    },
    Nmf {
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    },
    SlopeOne {
        /// `dev[i * n + j]` = mean over co-raters of `r_ui − r_uj`.
        dev: Vec<f64>,
        freq: Vec<u32>,
    },
}

/// A fitted comparison model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    variant: Variant,
    scale: (f64, f64),
    global_mean: f64,
    user_means: Vec<Option<f64>>,
    item_means: Vec<Option<f64>>,
    /// Training ratings per user and per item.
    by_user: Vec<Vec<(usize, f64)>>,
    by_item: Vec<Vec<(usize, f64)>>,
    state: State,
}

fn means(lists: &[Vec<(usize, f64)>]) -> Vec<Option<f64>> {
    lists
        .iter()
        .map(|l| (!l.is_empty()).then(|| l.iter().map(|x| x.1).sum::<f64>() / l.len() as f64))
        .collect()
}

impl BaselineModel {
    fn base(variant: Variant, train: &RatingsTable, state: State) -> Result<Self> {
        let global_mean = train
            .global_mean()
            .ok_or_else(|| Error::Domain(format!("{}: empty training table", variant.name())))?;
        let by_user = train.by_user();
        let by_item = train.by_item();
        Ok(Self {
            variant,
            scale: train.scale(),
            global_mean,
            user_means: means(&by_user),
            item_means: means(&by_item),
            by_user,
            by_item,
            state,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    fn user_known(&self, u: usize) -> bool {
        self.by_user.get(u).is_some_and(|l| !l.is_empty())
    }

    fn item_known(&self, i: usize) -> bool {
        self.by_item.get(i).is_some_and(|l| !l.is_empty())
    }

    fn user_mean_or_global(&self, u: usize) -> f64 {
        self.user_means.get(u).copied().flatten().unwrap_or(self.global_mean)
    }

    /// Prediction clipped to the rating scale.
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.predict_raw(user, item).clamp(self.scale.0, self.scale.1)
    }

    /// Unclipped prediction.
    pub fn predict_raw(&self, user: usize, item: usize) -> f64 {
        let (ku, ki) = (self.user_known(user), self.item_known(item));
        match &self.state {
            State::Bias { bu, bi } => {
                self.global_mean + if ku { bu[user] } else { 0.0 } + if ki { bi[item] } else { 0.0 }
            }
            State::Knn {
                user_based,
                with_means,
                k,
                sim,
            } => self.predict_knn(user, item, *user_based, *with_means, *k, sim),
            State::Svd { bu, bi, p, q } => {
                let mut est = self.global_mean;
                if ku {
                    est += bu[user];
                }
                if ki {
                    est += bi[item];
                }
                if ku && ki {
                    est += dot(&p[user], &q[item]);
                }
                est
            }
            State::Svdpp { bu, bi, p, q, y } => {
                let mut est = self.global_mean;
                if ku {
                    est += bu[user];
                }
                if ki {
                    est += bi[item];
                }
                if ku && ki {
                    let implicit = self.implicit_sum(user, y);
                    let pu: Vec<f64> = p[user].iter().zip(&implicit).map(|(a, b)| a + b).collect();
                    est += dot(&q[item], &pu);
                }
                est
            }
            State::Nmf { p, q } => {
                if ku && ki {
                    dot(&p[user], &q[item])
                } else {
                    self.global_mean
                }
            }
            State::SlopeOne { dev, freq } => {
                if !ku {
                    return self.global_mean;
                }
                let n = self.item_means.len();
                if !ki || item >= n {
                    return self.user_mean_or_global(user);
                }
                let (mut sum, mut count) = (0.0, 0usize);
                for &(j, r_uj) in &self.by_user[user] {
                    if j != item && freq[item * n + j] > 0 {
                        sum += dev[item * n + j] + r_uj;
                        count += 1;
                    }
                }
                if count == 0 {
                    self.user_mean_or_global(user)
                } else {
                    sum / count as f64
                }
            }
        }
    }

    /// `|N(u)|^{-1/2} Σ_{j∈N(u)} y_j`.
    fn implicit_sum(&self, user: usize, y: &[Vec<f64>]) -> Vec<f64> {
        let items = &self.by_user[user];
        let mut out = vec![0.0; y.first().map_or(0, Vec::len)];
        if items.is_empty() {
            return out;
        }
        for &(j, _) in items {
            out.iter_mut().zip(&y[j]).for_each(|(o, v)| *o += v);
        }
        let norm = (items.len() as f64).sqrt();
        out.iter_mut().for_each(|o| *o /= norm);
        out
    }

    fn predict_knn(&self, user: usize, item: usize, user_based: bool, with_means: bool, k: usize, sim: &[f64]) -> f64 {
        // x is the target entity, neighbours are of the same kind as x
        let (x, neighbours, means) = if user_based {
            (user, self.by_item.get(item), &self.user_means)
        } else {
            (item, self.by_user.get(user), &self.item_means)
        };
        let n = means.len();
        let fallback = if with_means {
            means.get(x).copied().flatten().unwrap_or_else(|| self.user_mean_or_global(user))
        } else {
            self.user_mean_or_global(user)
        };
        if x >= n || means[x].is_none() {
            return self.user_mean_or_global(user);
        }
        let Some(neighbours) = neighbours else {
            return fallback;
        };
        let mut candidates: Vec<(usize, f64, f64)> = neighbours
            .iter()
            .filter(|(nb, _)| *nb != x)
            .map(|&(nb, r)| (nb, sim[x * n + nb], r))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (mut sum_sim, mut sum) = (0.0, 0.0);
        for &(nb, s, r) in candidates.iter().take(k) {
            if s > 0.0 {
                sum_sim += s;
                sum += if with_means { s * (r - means[nb].expect("neighbour has ratings")) } else { s * r };
            }
        }
        if sum_sim == 0.0 {
            return fallback;
        }
        if with_means {
            means[x].expect("checked") + sum / sum_sim
        } else {
            sum / sum_sim
        }
    }

    /// Mean of the members' clipped predictions, clipped to the scale.
    pub fn predict_group(&self, members: &[usize], item: usize) -> Result<f64> {
        if members.is_empty() {
            return Err(Error::Domain("predict_group: empty group".into()));
        }
        let mean = members.iter().map(|&u| self.predict(u, item)).sum::<f64>() / members.len() as f64;
        Ok(mean.clamp(self.scale.0, self.scale.1))
    }

    /// Similarity between two entities of the neighbourhood kind.
    pub fn similarity(&self, a: usize, b: usize) -> Option<f64> {
        match &self.state {
            State::Knn { sim, user_based, .. } => {
                let n = if *user_based { self.user_means.len() } else { self.item_means.len() };
                (a < n && b < n).then(|| sim[a * n + b])
            }
            _ => None,
        }
    }

    /// Slope One deviation `dev(i, j)` when the items share a rater.
    pub fn deviation(&self, i: usize, j: usize) -> Option<f64> {
        match &self.state {
            State::SlopeOne { dev, freq } => {
                let n = self.item_means.len();
                (i < n && j < n && freq[i * n + j] > 0).then(|| dev[i * n + j])
            }
            _ => None,
        }
    }

    /// User and item biases for the bias, SVD and SVD++ variants.
    pub fn biases(&self) -> Option<(&[f64], &[f64])> {
        match &self.state {
            State::Bias { bu, bi } | State::Svd { bu, bi, .. } | State::Svdpp { bu, bi, .. } => Some((bu, bi)),
            _ => None,
        }
    }

    /// User and item factor matrices for SVD, SVD++ and NMF.
    pub fn factors(&self) -> Option<(&[Vec<f64>], &[Vec<f64>])> {
        match &self.state {
            State::Svd { p, q, .. } | State::Svdpp { p, q, .. } | State::Nmf { p, q } => Some((p, q)),
            _ => None,
        }
    }

    /// Root-mean-square error of unclipped predictions over `table`.
    pub fn rmse(&self, table: &RatingsTable) -> f64 {
        let se: f64 = table
            .ratings()
            .iter()
            .map(|r| (self.predict_raw(r.user, r.item) - r.value).powi(2))
            .sum();
        (se / table.len().max(1) as f64).sqrt()
    }
}

/// Fits any variant with its settings from `config`.
pub fn fit(variant: Variant, train: &RatingsTable, config: &BaselineConfig) -> Result<BaselineModel> {
    match variant {
        Variant::Bias => fit_bias(train, &config.bias),
        Variant::KnnBasicUser => fit_knn(train, true, false, config.knn_k),
        Variant::KnnMeansUser => fit_knn(train, true, true, config.knn_k),
        Variant::KnnBasicItem => fit_knn(train, false, false, config.knn_k),
        Variant::KnnMeansItem => fit_knn(train, false, true, config.knn_k),
        Variant::Svd => fit_svd(train, &config.svd, config.seed),
        Variant::Svdpp => fit_svdpp(train, &config.svdpp, config.seed),
        Variant::Nmf => fit_nmf(train, &config.nmf, config.seed),
        Variant::SlopeOne => fit_slope_one(train),
    }
}

/// `μ + b_u + b_i` by alternating least squares, iterated to convergence.
pub fn fit_bias(train: &RatingsTable, config: &BiasConfig) -> Result<BaselineModel> {
    let mut model = BaselineModel::base(
        Variant::Bias,
        train,
        State::Bias {
            bu: Vec::new(),
            bi: Vec::new(),
        },
    )?;
    let mu = model.global_mean;
    let mut bu = vec![0.0; train.n_users()];
    let mut bi = vec![0.0; train.n_items()];
    for _ in 0..config.max_sweeps {
        let mut moved: f64 = 0.0;
        for (i, raters) in model.by_item.iter().enumerate() {
            let new = raters.iter().map(|&(u, r)| r - mu - bu[u]).sum::<f64>() / (config.reg_i + raters.len() as f64);
            moved = moved.max((new - bi[i]).abs());
            bi[i] = new;
        }
        for (u, items) in model.by_user.iter().enumerate() {
            let new = items.iter().map(|&(i, r)| r - mu - bi[i]).sum::<f64>() / (config.reg_u + items.len() as f64);
            moved = moved.max((new - bu[u]).abs());
            bu[u] = new;
        }
        if moved <= config.tol {
            break;
        }
    }
    model.state = State::Bias { bu, bi };
    Ok(model)
}

/// Cosine similarity over co-rated entries for every pair of entities in
/// `lists` (each list holds `(other, rating)` for one entity; `n_other` is
/// the size of the opposite index).
fn cosine_similarities(lists: &[Vec<(usize, f64)>], transposed: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let n = lists.len();
    let mut prods = vec![0.0; n * n];
    let mut sq_a = vec![0.0; n * n];
    let mut sq_b = vec![0.0; n * n];
    for raters in transposed {
        for &(a, ra) in raters {
            let row = a * n;
            for &(b, rb) in raters {
                prods[row + b] += ra * rb;
                sq_a[row + b] += ra * ra;
                sq_b[row + b] += rb * rb;
            }
        }
    }
    prods
        .iter()
        .zip(sq_a.iter().zip(&sq_b))
        .map(|(&p, (&x, &y))| if x == 0.0 || y == 0.0 { 0.0 } else { p / (x * y).sqrt() })
        .collect()
}

/// Neighbourhood model: `user_based` picks user-user similarities,
/// `with_means` predicts mean-centered deviations.
pub fn fit_knn(train: &RatingsTable, user_based: bool, with_means: bool, k: usize) -> Result<BaselineModel> {
    if k == 0 {
        return Err(Error::Config("knn: k_neighbors must be ≥ 1".into()));
    }
    let variant = match (user_based, with_means) {
        (true, false) => Variant::KnnBasicUser,
        (true, true) => Variant::KnnMeansUser,
        (false, false) => Variant::KnnBasicItem,
        (false, true) => Variant::KnnMeansItem,
    };
    let mut model = BaselineModel::base(
        variant,
        train,
        State::Knn {
            user_based,
            with_means,
            k,
            sim: Vec::new(),
        },
    )?;
    let sim = if user_based {
        cosine_similarities(&model.by_user, &model.by_item)
    } else {
        cosine_similarities(&model.by_item, &model.by_user)
    };
    model.state = State::Knn {
        user_based,
        with_means,
        k,
        sim,
    };
    Ok(model)
}

fn check_factor_config(name: &str, config: &FactorConfig) -> Result<()> {
    if config.factors == 0 {
        return Err(Error::Config(format!("{name}: factors must be ≥ 1")));
    }
    if !(config.lr > 0.0 && config.reg >= 0.0 && config.init_std >= 0.0) {
        return Err(Error::Config(format!("{name}: lr must be positive, reg and init_std non-negative")));
    }
    Ok(())
}

fn normal_factors(n: usize, f: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| (0..f).map(|_| normal.sample(rng)).collect()).collect()
}

fn diverged(epoch: usize, lr: f64, loss: f64) -> Error {
    Error::Divergence { epoch, lr, loss }
}

/// Biased matrix factorization trained by SGD over the ratings in table
/// order.
pub fn fit_svd(train: &RatingsTable, config: &FactorConfig, seed: u64) -> Result<BaselineModel> {
    check_factor_config("svd", config)?;
    let mut model = BaselineModel::base(
        Variant::Svd,
        train,
        State::Bias {
            bu: Vec::new(),
            bi: Vec::new(),
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = model.global_mean;
    let (lr, reg) = (config.lr, config.reg);
    let mut bu = vec![0.0; train.n_users()];
    let mut bi = vec![0.0; train.n_items()];
    let mut p = normal_factors(train.n_users(), config.factors, config.init_std, &mut rng);
    let mut q = normal_factors(train.n_items(), config.factors, config.init_std, &mut rng);
    for epoch in 0..config.epochs {
        let mut se = 0.0;
        for r in train.ratings() {
            let (u, i) = (r.user, r.item);
            let err = r.value - (mu + bu[u] + bi[i] + dot(&p[u], &q[i]));
            se += err * err;
            bu[u] += lr * (err - reg * bu[u]);
            bi[i] += lr * (err - reg * bi[i]);
            for (pf, qf) in p[u].iter_mut().zip(q[i].iter_mut()) {
                let (puf, qif) = (*pf, *qf);
                *pf += lr * (err * qif - reg * puf);
                *qf += lr * (err * puf - reg * qif);
            }
        }
        if !se.is_finite() {
            return Err(diverged(epoch, lr, se));
        }
    }
    model.state = State::Svd { bu, bi, p, q };
    Ok(model)
}

/// SVD with the implicit-feedback term over the items each user rated.
pub fn fit_svdpp(train: &RatingsTable, config: &FactorConfig, seed: u64) -> Result<BaselineModel> {
    check_factor_config("svdpp", config)?;
    let mut model = BaselineModel::base(
        Variant::Svdpp,
        train,
        State::Bias {
            bu: Vec::new(),
            bi: Vec::new(),
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.factors;
    let mu = model.global_mean;
    let (lr, reg) = (config.lr, config.reg);
    let mut bu = vec![0.0; train.n_users()];
    let mut bi = vec![0.0; train.n_items()];
    let mut p = normal_factors(train.n_users(), f, config.init_std, &mut rng);
    let mut q = normal_factors(train.n_items(), f, config.init_std, &mut rng);
    let mut y = normal_factors(train.n_items(), f, config.init_std, &mut rng);
    let mut implicit = vec![0.0; f];
    for epoch in 0..config.epochs {
        let mut se = 0.0;
        for r in train.ratings() {
            let (u, i) = (r.user, r.item);
            let items = &model.by_user[u];
            let norm = (items.len() as f64).sqrt();
            implicit.iter_mut().for_each(|v| *v = 0.0);
            for &(j, _) in items {
                implicit.iter_mut().zip(&y[j]).for_each(|(s, v)| *s += v);
            }
            implicit.iter_mut().for_each(|v| *v /= norm);

            let est = mu + bu[u] + bi[i] + q[i].iter().zip(p[u].iter().zip(&implicit)).map(|(a, (b, c))| a * (b + c)).sum::<f64>();
            let err = r.value - est;
            se += err * err;
            bu[u] += lr * (err - reg * bu[u]);
            bi[i] += lr * (err - reg * bi[i]);
            for k in 0..f {
                let (puf, qif) = (p[u][k], q[i][k]);
                p[u][k] += lr * (err * qif - reg * puf);
                q[i][k] += lr * (err * (puf + implicit[k]) - reg * qif);
                let step = err * qif / norm;
                for &(j, _) in items {
                    let v = &mut y[j][k];
                    *v += lr * (step - reg * *v);
                }
            }
        }
        if !se.is_finite() {
            return Err(diverged(epoch, lr, se));
        }
    }
    model.state = State::Svdpp { bu, bi, p, q, y };
    Ok(model)
}

/// Unbiased non-negative factorization with regularized multiplicative
/// updates.
pub fn fit_nmf(train: &RatingsTable, config: &NmfConfig, seed: u64) -> Result<BaselineModel> {
    if config.factors == 0 {
        return Err(Error::Config("nmf: factors must be ≥ 1".into()));
    }
    if !(config.reg_pu >= 0.0 && config.reg_qi >= 0.0) {
        return Err(Error::Config("nmf: regularization must be non-negative".into()));
    }
    if train.ratings().iter().any(|r| r.value < 0.0) {
        return Err(Error::Domain("nmf needs non-negative ratings".into()));
    }
    let mut model = BaselineModel::base(
        Variant::Nmf,
        train,
        State::Bias {
            bu: Vec::new(),
            bi: Vec::new(),
        },
    )?;
    let f = config.factors;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut p: Vec<Vec<f64>> = (0..train.n_users()).map(|_| (0..f).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut q: Vec<Vec<f64>> = (0..train.n_items()).map(|_| (0..f).map(|_| unit.sample(&mut rng)).collect()).collect();
    let update = |factors: &mut [Vec<f64>], num: &[Vec<f64>], denom: &mut [Vec<f64>], counts: &[usize], reg: f64| {
        for (e, row) in factors.iter_mut().enumerate() {
            for k in 0..f {
                denom[e][k] += counts[e] as f64 * reg * row[k];
                if denom[e][k] > 0.0 {
                    row[k] *= num[e][k] / denom[e][k];
                }
            }
        }
    };
    let user_counts: Vec<usize> = model.by_user.iter().map(Vec::len).collect();
    let item_counts: Vec<usize> = model.by_item.iter().map(Vec::len).collect();
    for epoch in 0..config.epochs {
        let mut user_num = vec![vec![0.0; f]; p.len()];
        let mut user_denom = vec![vec![0.0; f]; p.len()];
        let mut item_num = vec![vec![0.0; f]; q.len()];
        let mut item_denom = vec![vec![0.0; f]; q.len()];
        for r in train.ratings() {
            let (u, i) = (r.user, r.item);
            let est = dot(&p[u], &q[i]);
            for k in 0..f {
                user_num[u][k] += q[i][k] * r.value;
                user_denom[u][k] += q[i][k] * est;
                item_num[i][k] += p[u][k] * r.value;
                item_denom[i][k] += p[u][k] * est;
            }
        }
        update(&mut p, &user_num, &mut user_denom, &user_counts, config.reg_pu);
        update(&mut q, &item_num, &mut item_denom, &item_counts, config.reg_qi);
        for (name, factors) in [("user", &p), ("item", &q)] {
            if let Some(bad) = factors.iter().flatten().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Invariant(format!("nmf: {name} factor {bad} after epoch {epoch}")));
            }
        }
    }
    model.state = State::Nmf { p, q };
    Ok(model)
}

/// Item-item average deviations.
pub fn fit_slope_one(train: &RatingsTable) -> Result<BaselineModel> {
    let mut model = BaselineModel::base(
        Variant::SlopeOne,
        train,
        State::Bias {
            bu: Vec::new(),
            bi: Vec::new(),
        },
    )?;
    let n = train.n_items();
    let mut dev = vec![0.0; n * n];
    let mut freq = vec![0u32; n * n];
    for items in &model.by_user {
        for &(i, ri) in items {
            for &(j, rj) in items {
                if i != j {
                    dev[i * n + j] += ri - rj;
                    freq[i * n + j] += 1;
                }
            }
        }
    }
    dev.iter_mut().zip(&freq).for_each(|(d, &c)| {
        if c > 0 {
            *d /= f64::from(c);
        }
    });
    model.state = State::SlopeOne { dev, freq };
    Ok(model)
}

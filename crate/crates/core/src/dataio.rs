//! Rating ingestion, index maps, train/test splitting and the per-user /
//! per-item feature vectors fed to clustering and to the network.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One observed rating, already mapped to contiguous indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: Option<i64>,
}

/// External id ↔ contiguous index bijection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    /// Indexes ids in ascending order, numerically when every id is an integer.
    fn from_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Self {
        let mut unique: Vec<&str> = ids.collect();
        unique.sort_unstable();
        unique.dedup();
        let numeric: Option<Vec<i64>> = unique.iter().map(|s| s.parse::<i64>().ok()).collect();
        if let Some(nums) = numeric {
            let mut pairs: Vec<(i64, &str)> = nums.into_iter().zip(unique).collect();
            pairs.sort_unstable();
            unique = pairs.into_iter().map(|(_, s)| s).collect();
        }
        let ids: Vec<String> = unique.into_iter().map(str::to_owned).collect();
        let lookup = ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
        Self { ids, lookup }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> &str {
        &self.ids[index]
    }
}

/// Sparse rating store. Train and test halves of a split share the index
/// maps of the table they came from.
#[derive(Clone, Debug)]
pub struct RatingsTable {
    ratings: Vec<Rating>,
    users: IdIndex,
    items: IdIndex,
    scale: (f64, f64),
    duplicates_dropped: usize,
}

/// Table I style summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub scale: (f64, f64),
    pub sparsity: f64,
    pub duplicates_dropped: usize,
}

struct RawRecord<'a> {
    user: &'a str,
    item: &'a str,
    rating: f64,
    timestamp: Option<i64>,
    line: usize,
}

impl RatingsTable {
    fn from_raw(records: Vec<RawRecord<'_>>, scale: (f64, f64), path: &Path) -> Result<Self> {
        let (lo, hi) = scale;
        for r in &records {
            if !r.rating.is_finite() || r.rating < lo || r.rating > hi {
                return Err(Error::Validation(format!(
                    "{}:{}: rating {} outside scale [{lo}, {hi}]",
                    path.display(),
                    r.line,
                    r.rating
                )));
            }
        }
        let users = IdIndex::from_ids(records.iter().map(|r| r.user));
        let items = IdIndex::from_ids(records.iter().map(|r| r.item));

        // Last occurrence of a (user, item) pair wins; it keeps the position
        // of the first occurrence so file order is otherwise preserved.
        let mut position: HashMap<(usize, usize), usize> = HashMap::with_capacity(records.len());
        let mut ratings: Vec<Rating> = Vec::with_capacity(records.len());
        let mut duplicates_dropped = 0;
        for r in &records {
            let rating = Rating {
                user: users.index_of(r.user).expect("indexed above"),
                item: items.index_of(r.item).expect("indexed above"),
                value: r.rating,
                timestamp: r.timestamp,
            };
            match position.get(&(rating.user, rating.item)) {
                Some(&pos) => {
                    ratings[pos] = rating;
                    duplicates_dropped += 1;
                }
                None => {
                    position.insert((rating.user, rating.item), ratings.len());
                    ratings.push(rating);
                }
            }
        }
        Ok(Self {
            ratings,
            users,
            items,
            scale,
            duplicates_dropped,
        })
    }

    /// Builds a table over an existing index space. Used by tests and by
    /// callers that synthesize ratings.
    pub fn from_ratings(
        ratings: Vec<Rating>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        scale: (f64, f64),
    ) -> Result<Self> {
        let users = index_from_ordered(user_ids)?;
        let items = index_from_ordered(item_ids)?;
        for r in &ratings {
            if r.user >= users.len() || r.item >= items.len() {
                return Err(Error::Index {
                    what: "rating index space",
                    index: r.user.max(r.item),
                    len: users.len().min(items.len()),
                });
            }
            if r.value < scale.0 || r.value > scale.1 {
                return Err(Error::Validation(format!("rating {} outside scale", r.value)));
            }
        }
        Ok(Self {
            ratings,
            users,
            items,
            scale,
            duplicates_dropped: 0,
        })
    }

    fn with_ratings(&self, ratings: Vec<Rating>) -> Self {
        Self {
            ratings,
            users: self.users.clone(),
            items: self.items.clone(),
            scale: self.scale,
            duplicates_dropped: 0,
        }
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn items(&self) -> &IdIndex {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn scale(&self) -> (f64, f64) {
        self.scale
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn clip(&self, value: f64) -> f64 {
        value.clamp(self.scale.0, self.scale.1)
    }

    pub fn global_mean(&self) -> Option<f64> {
        if self.ratings.is_empty() {
            None
        } else {
            Some(self.ratings.iter().map(|r| r.value).sum::<f64>() / self.ratings.len() as f64)
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let cells = (self.n_users() * self.n_items()) as f64;
        let sparsity = if cells > 0.0 {
            1.0 - self.len() as f64 / cells
        } else {
            0.0
        };
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            ratings: self.len(),
            scale: self.scale,
            sparsity,
            duplicates_dropped: self.duplicates_dropped,
        }
    }

    /// Ratings grouped by user index, in table order.
    pub fn by_user(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for r in &self.ratings {
            out[r.user].push((r.item, r.value));
        }
        out
    }

    /// Ratings grouped by item index, in table order.
    pub fn by_item(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_items()];
        for r in &self.ratings {
            out[r.item].push((r.user, r.value));
        }
        out
    }

    /// Writes the table in MovieLens `u.data` layout.
    pub fn write_movielens(&self, mut out: impl Write) -> Result<()> {
        for r in &self.ratings {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.users.id_of(r.user),
                self.items.id_of(r.item),
                r.value,
                r.timestamp.unwrap_or(0)
            )?;
        }
        Ok(())
    }
}

fn index_from_ordered(ids: Vec<String>) -> Result<IdIndex> {
    let lookup: HashMap<String, usize> = ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
    if lookup.len() != ids.len() {
        return Err(Error::Validation("duplicate external id".into()));
    }
    Ok(IdIndex { ids, lookup })
}

/// Parses a MovieLens `u.data` file: `user\titem\trating\ttimestamp`, scale [1, 5].
pub fn parse_movielens(path: impl AsRef<Path>) -> Result<RatingsTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_movielens_str(&text, path)
}

pub(crate) fn parse_movielens_str(text: &str, path: &Path) -> Result<RatingsTable> {
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad rating {:?}", fields[2])))?;
        let timestamp: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp {:?}", fields[3])))?;
        records.push(RawRecord {
            user: fields[0].trim(),
            item: fields[1].trim(),
            rating,
            timestamp: Some(timestamp),
            line: line_no,
        });
    }
    RatingsTable::from_raw(records, (1.0, 5.0), path)
}

/// Column names and scale for [`parse_generic_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvColumns {
    pub user: String,
    pub item: String,
    pub rating: String,
    pub timestamp: Option<String>,
    pub scale: (f64, f64),
}

impl Default for CsvColumns {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            rating: "rating".into(),
            timestamp: None,
            scale: (1.0, 5.0),
        }
    }
}

/// Parses a comma-separated file with a header row naming the columns.
pub fn parse_generic_csv(path: impl AsRef<Path>, columns: &CsvColumns) -> Result<RatingsTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_csv_str(&text, columns, path)
}

pub(crate) fn parse_csv_str(text: &str, columns: &CsvColumns, path: &Path) -> Result<RatingsTable> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return RatingsTable::from_raw(Vec::new(), columns.scale, path);
    };
    let header: Vec<&str> = header.split(',').map(|h| h.trim().trim_start_matches('\u{feff}')).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name:?} (header: {header:?})", path.display())))
    };
    let (cu, ci, cr) = (find(&columns.user)?, find(&columns.item)?, find(&columns.rating)?);
    let ct = columns.timestamp.as_deref().map(find).transpose()?;
    let needed = [Some(cu), Some(ci), Some(cr), ct].into_iter().flatten().max().unwrap_or(0) + 1;

    let mut records = Vec::new();
    for (k, line) in lines {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if fields.len() < needed {
            return Err(parse_err(format!("expected at least {needed} fields, found {}", fields.len())));
        }
        let rating: f64 = fields[cr]
            .parse()
            .map_err(|_| parse_err(format!("bad rating {:?}", fields[cr])))?;
        let timestamp = match ct {
            Some(c) => Some(
                fields[c]
                    .parse::<i64>()
                    .map_err(|_| parse_err(format!("bad timestamp {:?}", fields[c])))?,
            ),
            None => None,
        };
        records.push(RawRecord {
            user: fields[cu],
            item: fields[ci],
            rating,
            timestamp,
            line: line_no,
        });
    }
    RatingsTable::from_raw(records, columns.scale, path)
}

/// Train/test partition settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by_user: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 42,
            stratify_by_user: true,
        }
    }
}

/// Seeded partition of `table` into train and test.
///
/// With stratification each user's ratings are shuffled and the first
/// `round(f·n)` go to train, clamped so that a user with at least two
/// ratings keeps one on each side and a single rating lands in train.
pub fn split(table: &RatingsTable, spec: &SplitSpec) -> Result<(RatingsTable, RatingsTable)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if table.is_empty() {
        return Err(Error::Domain("cannot split an empty table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_train = vec![false; table.len()];
    if spec.stratify_by_user {
        let mut per_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, r) in table.ratings.iter().enumerate() {
            per_user.entry(r.user).or_default().push(k);
        }
        for positions in per_user.values_mut() {
            positions.shuffle(&mut rng);
            let n = positions.len();
            let mut n_train = (spec.train_fraction * n as f64).round() as usize;
            if n >= 2 {
                n_train = n_train.clamp(1, n - 1);
            } else {
                n_train = n;
            }
            for &k in &positions[..n_train] {
                in_train[k] = true;
            }
        }
    } else {
        let mut positions: Vec<usize> = (0..table.len()).collect();
        positions.shuffle(&mut rng);
        let n_train = (spec.train_fraction * table.len() as f64).round() as usize;
        for &k in &positions[..n_train] {
            in_train[k] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, keep) in table.ratings.iter().zip(in_train) {
        if keep {
            train.push(*r);
        } else {
            test.push(*r);
        }
    }
    Ok((table.with_ratings(train), table.with_ratings(test)))
}

/// Dense per-entity features; one row per user (or item).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::Validation("feature matrix has non-finite entries".into()));
        }
        Ok(Self(matrix))
    }

    pub fn entity_count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.0.row(k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// How a rating row is turned into a feature vector before L2 normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRecipe {
    /// Subtract the mean of the rated entries.
    #[default]
    Centered,
    /// Keep raw ratings.
    Raw,
}

fn interaction_rows(n_rows: usize, dim: usize, rows: &[Vec<(usize, f64)>], recipe: FeatureRecipe) -> Result<FeatureMatrix> {
    let mut m = Matrix::zeros(n_rows, dim);
    for (k, entries) in rows.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let shift = match recipe {
            FeatureRecipe::Centered => entries.iter().map(|(_, v)| v).sum::<f64>() / entries.len() as f64,
            FeatureRecipe::Raw => 0.0,
        };
        let row = m.row_mut(k);
        for &(c, v) in entries {
            row[c] = v - shift;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A constant row centers to zero and stays zero.
        if norm > 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    FeatureMatrix::new(m)
}

/// `x_u`: the user's rating row over all items, mean-centered over rated
/// entries, L2-normalized. `dim = n_items`.
pub fn build_user_features(train: &RatingsTable) -> Result<FeatureMatrix> {
    build_user_features_with(train, FeatureRecipe::Centered)
}

pub fn build_user_features_with(train: &RatingsTable, recipe: FeatureRecipe) -> Result<FeatureMatrix> {
    if train.is_empty() {
        return Err(Error::Domain("cannot build features from an empty table".into()));
    }
    interaction_rows(train.n_users(), train.n_items(), &train.by_user(), recipe)
}

/// `x_i`: the item's rating column over all users. `dim = n_users`.
pub fn build_item_features(train: &RatingsTable) -> Result<FeatureMatrix> {
    build_item_features_with(train, FeatureRecipe::Centered)
}

pub fn build_item_features_with(train: &RatingsTable, recipe: FeatureRecipe) -> Result<FeatureMatrix> {
    if train.is_empty() {
        return Err(Error::Domain("cannot build features from an empty table".into()));
    }
    interaction_rows(train.n_items(), train.n_users(), &train.by_item(), recipe)
}

use std::collections::BTreeMap;
use std::path::Path;

use super::{
    io_err, kcore_filter, load_interactions, load_items, write_items, DataError, DatasetStats, FeatureTable,
    InteractionLog, ItemMeta, Result, IMG_FEATURES_FILE, INTERACTIONS_FILE, ITEMS_FILE, STATS_FILE,
    TXT_FEATURES_FILE,
};

/// One user's chronological history in internal item indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

/// Frozen per-item features, `(n_items + 1) x dim` with a zero padding row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(n_items: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; (n_items + 1) * dim] }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub text: bool,
    pub image: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { text: true, image: true }
    }
}

/// An indexed dataset ready for splitting. Items are numbered `1..=n_items`
/// in lexicographic token order; index 0 is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub item_tokens: Vec<String>,
    pub sequences: Vec<UserSequence>,
    pub item_categories: Vec<Vec<usize>>,
    pub n_categories: usize,
    pub text: FeatureMatrix,
    pub image: FeatureMatrix,
    /// Smallest timestamp in the log; absolute time is measured from here.
    pub time_origin: i64,
}

impl Dataset {
    /// Indexes `log`. A modality without a table gets all-zero features of
    /// width 1. Every item in the log must have a row in each given table.
    pub fn build(
        log: &InteractionLog,
        items: &[ItemMeta],
        text: Option<&FeatureTable>,
        image: Option<&FeatureTable>,
    ) -> Result<Self> {
        let item_tokens: Vec<String> = log.item_degrees().into_keys().map(str::to_string).collect();
        let index: BTreeMap<&str, usize> =
            item_tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i + 1)).collect();
        let n_items = item_tokens.len();

        let meta: BTreeMap<&str, &ItemMeta> = items.iter().map(|m| (m.item.as_str(), m)).collect();
        let n_categories = items.iter().flat_map(|m| m.categories.iter()).max().map_or(0, |&c| c + 1);
        let mut item_categories = vec![Vec::new(); n_items + 1];
        for (tok, &i) in &index {
            if let Some(m) = meta.get(tok) {
                item_categories[i] = m.categories.iter().copied().collect();
            }
        }

        let sequences = log
            .users()
            .map(|(user, evs)| UserSequence {
                user: user.to_string(),
                items: evs.iter().map(|e| index[e.item.as_str()]).collect(),
                timestamps: evs.iter().map(|e| e.timestamp).collect(),
            })
            .collect();

        let gather = |table: Option<&FeatureTable>, what: &str| -> Result<FeatureMatrix> {
            let Some(table) = table else { return Ok(FeatureMatrix::zeros(n_items, 1)) };
            let mut m = FeatureMatrix::zeros(n_items, table.dim);
            for (i, tok) in item_tokens.iter().enumerate() {
                let row = table
                    .get(tok)
                    .ok_or_else(|| DataError::Invalid(format!("item `{tok}` has no {what} feature row")))?;
                m.data[(i + 1) * table.dim..(i + 2) * table.dim].copy_from_slice(row);
            }
            Ok(m)
        };

        Ok(Self {
            text: gather(text, "text")?,
            image: gather(image, "image")?,
            item_tokens,
            sequences,
            item_categories,
            n_categories,
            time_origin: log.timestamps().min().unwrap_or(0),
        })
    }

    /// Loads a prepared directory. Feature files of disabled modalities are
    /// never opened.
    pub fn load(dir: &Path, opts: LoadOptions) -> Result<Self> {
        let log = load_interactions(&dir.join(INTERACTIONS_FILE))?;
        let items = load_items(&dir.join(ITEMS_FILE))?;
        let text = opts.text.then(|| FeatureTable::read(&dir.join(TXT_FEATURES_FILE))).transpose()?;
        let image = opts.image.then(|| FeatureTable::read(&dir.join(IMG_FEATURES_FILE))).transpose()?;
        Self::build(&log, &items, text.as_ref(), image.as_ref())
    }

    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }
}

/// Raw inputs of `prepare`.
#[derive(Clone, Debug)]
pub struct RawInputs<'a> {
    pub interactions: &'a Path,
    pub items: &'a Path,
    pub text_features: &'a Path,
    pub image_features: &'a Path,
}

/// Ingests raw files, applies the k-core filter and writes a prepared
/// directory: interactions, item metadata and feature tables restricted to
/// surviving items, plus `stats.json`.
pub fn prepare(inputs: &RawInputs<'_>, k: usize, out: &Path) -> Result<DatasetStats> {
    let log = kcore_filter(&load_interactions(inputs.interactions)?, k);
    let items = load_items(inputs.items)?;
    let text = FeatureTable::read(inputs.text_features)?;
    let image = FeatureTable::read(inputs.image_features)?;
    let dataset = Dataset::build(&log, &items, Some(&text), Some(&image))?;
    write_prepared(&log, &items, &text, &image, out, dataset.n_categories)
}

pub(crate) fn write_prepared(
    log: &InteractionLog,
    items: &[ItemMeta],
    text: &FeatureTable,
    image: &FeatureTable,
    out: &Path,
    n_categories: usize,
) -> Result<DatasetStats> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let kept = log.item_degrees();
    let keep = |tok: &str| kept.contains_key(tok);
    log.write(&out.join(INTERACTIONS_FILE))?;
    let meta: Vec<ItemMeta> = items.iter().filter(|m| keep(&m.item)).cloned().collect();
    write_items(&meta, &out.join(ITEMS_FILE))?;
    for (table, name) in [(text, TXT_FEATURES_FILE), (image, IMG_FEATURES_FILE)] {
        let rows = table
            .ids()
            .iter()
            .filter(|id| keep(id))
            .map(|id| (id.clone(), table.get(id).unwrap().to_vec()))
            .collect();
        FeatureTable::new(table.dim, rows)?.write(&out.join(name))?;
    }
    let stats = DatasetStats::of(log, n_categories);
    let path = out.join(STATS_FILE);
    let json = serde_json::to_string_pretty(&stats).map_err(|e| DataError::Invalid(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(stats)
}

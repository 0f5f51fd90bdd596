//! Datasets indexed by `index.csv` (`path,category,split`) with BTSR
//! images, split into disjoint base / val / test category sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tensor::{Btsr, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Base,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split `{other}` (expected base, val or test)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Category {
    pub name: String,
    pub split: Split,
    /// Image ids in index order.
    pub images: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Entry {
    path: PathBuf,
    category: usize,
}

enum Storage {
    Disk { root: PathBuf, cache: Mutex<HashMap<usize, Arc<Tensor>>> },
    Memory(Vec<Arc<Tensor>>),
}

pub struct Dataset {
    entries: Vec<Entry>,
    categories: Vec<Category>,
    storage: Storage,
    access_log: Mutex<BTreeMap<Split, BTreeSet<usize>>>,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("images", &self.entries.len())
            .field("categories", &self.categories.len())
            .finish()
    }
}

const HEADER: &str = "path,category,split";

impl Dataset {
    /// Reads `root/index.csv`, validating splits and file presence.
    pub fn load(root: &Path) -> Result<Dataset> {
        let index = root.join("index.csv");
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == HEADER => {}
            _ => return Err(Error::load(&index, format!("row 1: header must be `{HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = i + 2;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [path, category, split] = fields[..] else {
                return Err(Error::load(&index, format!("row {row}: expected 3 fields, got {}", fields.len())));
            };
            if path.is_empty() || category.is_empty() {
                return Err(Error::load(&index, format!("row {row}: empty path or category")));
            }
            let split: Split = split
                .parse()
                .map_err(|e: Error| Error::load(&index, format!("row {row}: {e}")))?;
            if !root.join(path).is_file() {
                return Err(Error::load(&index, format!("row {row}: missing image file {path}")));
            }
            rows.push((row, PathBuf::from(path), category.to_string(), split));
        }
        let storage = Storage::Disk {
            root: root.to_path_buf(),
            cache: Mutex::new(HashMap::new()),
        };
        Self::build(rows, storage, &index)
    }

    /// Builds a dataset around images already in memory; rows are
    /// `(image, category, split)` and image ids follow the given order.
    pub fn from_memory(rows: Vec<(Tensor, String, Split)>) -> Result<Dataset> {
        let mut images = Vec::with_capacity(rows.len());
        let mut meta = Vec::with_capacity(rows.len());
        for (i, (img, cat, split)) in rows.into_iter().enumerate() {
            check_image_shape(&img, Path::new("<memory>"))?;
            images.push(Arc::new(img));
            meta.push((i + 1, PathBuf::new(), cat, split));
        }
        Self::build(meta, Storage::Memory(images), Path::new("<memory>"))
    }

    fn build(rows: Vec<(usize, PathBuf, String, Split)>, storage: Storage, ctx: &Path) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::load(ctx, "index lists no images"));
        }
        let mut categories: Vec<Category> = Vec::new();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::with_capacity(rows.len());
        for (id, (row, path, name, split)) in rows.into_iter().enumerate() {
            let cat = match by_name.get(&name) {
                Some(&c) => {
                    if categories[c].split != split {
                        return Err(Error::load(
                            ctx,
                            format!(
                                "row {row}: category {name} appears in both {} and {split}",
                                categories[c].split
                            ),
                        ));
                    }
                    c
                }
                None => {
                    categories.push(Category {
                        name: name.clone(),
                        split,
                        images: Vec::new(),
                    });
                    by_name.insert(name, categories.len() - 1);
                    categories.len() - 1
                }
            };
            categories[cat].images.push(id);
            entries.push(Entry { path, category: cat });
        }
        Ok(Dataset {
            entries,
            categories,
            storage,
            access_log: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn category(&self, id: usize) -> &Category {
        &self.categories[id]
    }

    pub fn all_categories(&self) -> &[Category] {
        &self.categories
    }

    /// Category ids of `split`, in index order.
    pub fn categories(&self, split: Split) -> Vec<usize> {
        (0..self.categories.len())
            .filter(|&c| self.categories[c].split == split)
            .collect()
    }

    pub fn category_by_name(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn label(&self, image: usize) -> usize {
        self.entries[image].category
    }

    pub fn split_of(&self, image: usize) -> Split {
        self.categories[self.entries[image].category].split
    }

    /// Image ids of `split`, in index order.
    pub fn images(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.split_of(i) == split).collect()
    }

    pub fn relative_path(&self, image: usize) -> &Path {
        &self.entries[image].path
    }

    /// Loads image `id` as a 3×H×W tensor in `[0, 1]`, recording the access.
    pub fn image(&self, id: usize) -> Result<Arc<Tensor>> {
        if id >= self.entries.len() {
            return Err(Error::usage(format!("image id {id} out of range")));
        }
        self.access_log
            .lock()
            .unwrap()
            .entry(self.split_of(id))
            .or_default()
            .insert(id);
        match &self.storage {
            Storage::Memory(images) => Ok(images[id].clone()),
            Storage::Disk { root, cache } => {
                if let Some(t) = cache.lock().unwrap().get(&id) {
                    return Ok(t.clone());
                }
                let path = root.join(&self.entries[id].path);
                let t = Btsr::read_file(&path)?.into_tensor();
                check_image_shape(&t, &path)?;
                let t = Arc::new(t);
                cache.lock().unwrap().insert(id, t.clone());
                Ok(t)
            }
        }
    }

    /// Image ids read so far from `split`.
    pub fn accessed(&self, split: Split) -> BTreeSet<usize> {
        self.access_log
            .lock()
            .unwrap()
            .get(&split)
            .cloned()
            .unwrap_or_default()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().unwrap().clear();
    }
}

fn check_image_shape(t: &Tensor, path: &Path) -> Result<()> {
    match t.shape() {
        [3, _, _] => Ok(()),
        other => Err(Error::load(path, format!("image must be 3×H×W, got {other:?}"))),
    }
}

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::Pcg32;

/// Shape of a K-way N-shot task with M queries per category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        EpisodeSpec { way, shot, query }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::usage(format!(
                "episode needs way ≥ 2, shot ≥ 1, query ≥ 1 (got {}-way {}-shot {} queries)",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One sampled task. Labels are positions in `categories` (0..K).
/// Support and query lists are category-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub categories: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.categories.len()
    }

    /// Support image ids of slot `k`.
    pub fn support_of(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().filter(move |(_, l)| *l == k).map(|(id, _)| *id)
    }
}

/// Samples K categories without replacement, then N + M distinct images
/// from each; the first N become support.
pub fn sample_episode(ds: &Dataset, split: Split, spec: EpisodeSpec, rng: &mut Pcg32) -> Result<Episode> {
    spec.validate()?;
    let need = spec.shot + spec.query;
    let eligible: Vec<usize> = ds
        .categories(split)
        .into_iter()
        .filter(|&c| ds.category(c).images.len() >= need)
        .collect();
    if eligible.len() < spec.way {
        return Err(Error::usage(format!(
            "{split} split has {} categories with ≥ {need} images; {}-way episodes need {}",
            eligible.len(),
            spec.way,
            spec.way
        )));
    }
    let categories = rng.sample(&eligible, spec.way);
    let mut support = Vec::with_capacity(spec.way * spec.shot);
    let mut query = Vec::with_capacity(spec.way * spec.query);
    for (k, &c) in categories.iter().enumerate() {
        let picked = rng.sample(&ds.category(c).images, need);
        support.extend(picked[..spec.shot].iter().map(|&id| (id, k)));
        query.extend(picked[spec.shot..].iter().map(|&id| (id, k)));
    }
    Ok(Episode {
        categories,
        support,
        query,
    })
}

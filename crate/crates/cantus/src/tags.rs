//! Tag categories, the category selection-probability table, and seeded
//! category sampling.

use std::collections::BTreeMap;

use crate::rng::Rng;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Gender,
    Genre,
    Instrument,
    Mood,
    Scene,
    SingerTimbre,
    Topic,
    Region,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Gender,
        Category::Genre,
        Category::Instrument,
        Category::Mood,
        Category::Scene,
        Category::SingerTimbre,
        Category::Topic,
        Category::Region,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Genre => "genre",
            Category::Instrument => "instrument",
            Category::Mood => "mood",
            Category::Scene => "scene",
            Category::SingerTimbre => "singer_timbre",
            Category::Topic => "topic",
            Category::Region => "region",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.iter().find(|c| c.name() == name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSet {
    pub entries: BTreeMap<Category, Vec<String>>,
}

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cat: Category, tags: &[&str]) -> &mut Self {
        self.entries.insert(cat, tags.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|v| v.is_empty())
    }

    /// All tags in canonical category order.
    pub fn flat_tags(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for cat in Category::ALL {
            if let Some(tags) = self.entries.get(&cat) {
                out.extend(tags.iter().map(String::as_str));
            }
        }
        out
    }
}

/// Per-category selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TagProbTable {
    pub probs: BTreeMap<Category, f64>,
}

impl Default for TagProbTable {
    fn default() -> Self {
        let mut probs = BTreeMap::new();
        probs.insert(Category::Genre, 0.95);
        probs.insert(Category::SingerTimbre, 0.5);
        probs.insert(Category::Gender, 0.375);
        probs.insert(Category::Mood, 0.325);
        probs.insert(Category::Instrument, 0.25);
        probs.insert(Category::Scene, 0.2);
        probs.insert(Category::Region, 0.125);
        probs.insert(Category::Topic, 0.1);
        TagProbTable { probs }
    }
}

impl TagProbTable {
    pub fn uniform(p: f64) -> Self {
        TagProbTable { probs: Category::ALL.iter().map(|&c| (c, p)).collect() }
    }

    pub fn prob(&self, cat: Category) -> f64 {
        self.probs.get(&cat).copied().unwrap_or(0.0)
    }
}

/// Keep or drop each category independently with its table probability.
/// Kept categories retain all tags; dropped ones are emptied. One uniform
/// draw is consumed per category in canonical order regardless of input, so
/// a given seed always produces the same keep pattern.
pub fn sample_tags(tags: &TagSet, table: &TagProbTable, rng: &mut Rng) -> TagSet {
    let mut out = TagSet::new();
    for cat in Category::ALL {
        let keep = rng.random::<f64>() < table.prob(cat);
        if let Some(list) = tags.entries.get(&cat) {
            out.entries.insert(cat, if keep { list.clone() } else { Vec::new() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn full_tagset() -> TagSet {
        let mut t = TagSet::new();
        t.insert(Category::Gender, &["female"])
            .insert(Category::Genre, &["pop", "rock"])
            .insert(Category::Instrument, &["piano"])
            .insert(Category::Mood, &["warm"])
            .insert(Category::Scene, &["driving"])
            .insert(Category::SingerTimbre, &["bright"])
            .insert(Category::Topic, &["summer"])
            .insert(Category::Region, &["north"]);
        t
    }

    #[test]
    fn default_table_matches_published_probabilities() {
        let t = TagProbTable::default();
        assert_eq!(t.prob(Category::Genre), 0.95);
        assert_eq!(t.prob(Category::SingerTimbre), 0.5);
        assert_eq!(t.prob(Category::Gender), 0.375);
        assert_eq!(t.prob(Category::Mood), 0.325);
        assert_eq!(t.prob(Category::Instrument), 0.25);
        assert_eq!(t.prob(Category::Scene), 0.2);
        assert_eq!(t.prob(Category::Region), 0.125);
        assert_eq!(t.prob(Category::Topic), 0.1);
    }

    #[test]
    fn prob_one_keeps_everything() {
        let tags = full_tagset();
        let out = sample_tags(&tags, &TagProbTable::uniform(1.0), &mut seeded(5));
        assert_eq!(out, tags);
    }

    #[test]
    fn prob_zero_empties_all_categories() {
        let out = sample_tags(&full_tagset(), &TagProbTable::uniform(0.0), &mut seeded(5));
        assert!(out.entries.values().all(Vec::is_empty));
        assert_eq!(out.entries.len(), 8, "keys survive with empty lists");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let tags = full_tagset();
        let table = TagProbTable::default();
        let a = sample_tags(&tags, &table, &mut seeded(99));
        let b = sample_tags(&tags, &table, &mut seeded(99));
        assert_eq!(a, b);
    }

    #[test]
    fn genre_keep_rate_matches_table() {
        let tags = full_tagset();
        let table = TagProbTable::default();
        let mut rng = seeded(12345);
        let n = 100_000;
        let mut kept = 0u32;
        for _ in 0..n {
            let out = sample_tags(&tags, &table, &mut rng);
            if !out.entries[&Category::Genre].is_empty() {
                kept += 1;
            }
        }
        let rate = f64::from(kept) / f64::from(n);
        assert!((rate - 0.95).abs() < 0.01, "genre keep rate {rate}");
    }
}

//! Small generated SQL corpora where every question shares an identifier with
//! its own snippet. Useful for smoke tests and overfitting checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RawPair;

const NOUNS: &[&str] = &[
    "customer",
    "invoice",
    "employee",
    "product",
    "order",
    "supplier",
    "warehouse",
    "shipment",
    "payment",
    "account",
    "student",
    "course",
    "teacher",
    "library",
    "message",
    "session",
    "ticket",
    "vehicle",
    "patient",
    "doctor",
    "booking",
    "flight",
    "hotel",
    "review",
    "comment",
    "category",
    "region",
    "branch",
    "contract",
    "project",
    "device",
    "sensor",
    "article",
    "author",
    "playlist",
    "album",
    "recipe",
    "ingredient",
    "tournament",
    "player",
];

const ATTRS: &[&str] = &[
    "name", "date", "price", "status", "total", "address", "email", "score", "count", "level",
];

const TEMPLATES: &[(&str, &str)] = &[
    (
        "how to select the {attr} of every {noun}",
        "SELECT {id}_{attr} FROM {id}_table;",
    ),
    (
        "get {noun} rows where the {attr} is missing",
        "SELECT * FROM {id}s WHERE {attr} IS NULL",
    ),
    (
        "count {noun} records grouped by {attr}",
        "SELECT {attr}, COUNT(*) FROM {id}_records GROUP BY {attr}",
    ),
    (
        "find the largest {attr} for each {noun}",
        "SELECT {id}_id, MAX({attr}) FROM {id} GROUP BY {id}_id",
    ),
    (
        "delete duplicate {noun} entries with the same {attr}",
        "DELETE FROM {id}_list WHERE rowid NOT IN (SELECT MIN(rowid) FROM {id}_list GROUP BY {attr})",
    ),
];

/// `n` pairs with ids `syn-0000`, `syn-0001`, ...
///
/// Each pair uses its own noun; about a third of the snippets abbreviate it to
/// its first four letters (`customer` -> `cust`), so overlaps are partial.
pub fn pairs(n: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let noun = if i < nouns.len() {
                nouns[i].to_string()
            } else {
                format!("{}{}", nouns[i % nouns.len()], i / nouns.len())
            };
            let attr = ATTRS[rng.random_range(0..ATTRS.len())];
            let (q, c) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let id = if rng.random_bool(1.0 / 3.0) {
                noun.chars().take(4).collect()
            } else {
                noun.clone()
            };
            let fill = |s: &str| {
                s.replace("{noun}", &noun)
                    .replace("{attr}", attr)
                    .replace("{id}", &id)
            };
            RawPair {
                id: format!("syn-{i:04}"),
                question: fill(q),
                code: fill(c),
            }
        })
        .collect()
}

//! Deterministic synthetic dataset generator.
//!
//! Items form star families: each root spawns children displaced along a
//! pair of attribute directions (scaled coordinate axes), and the caption
//! names those attributes. Roots live on the non-attribute coordinates with
//! a fixed norm, which pins the family geometry:
//!
//! * a composer that adds the named directions to the candidate ranks the
//!   true child first with a wide cosine margin, while
//! * the candidate alone sees all of its ~14 children at one identical
//!   distance, so an identity composer cannot fit them into a top-10 cut,
//!   and
//! * captions alone leave every same-pair child of every root plausible.

use super::{Category, DatastoreError, FeatureStore, FeatureVector, Split, TripletRecord};
use crate::rng::Rng;

/// Attribute words the generator may draw from.
pub const ATTRIBUTE_POOL: [&str; 16] = [
    "red", "blue", "green", "black", "white", "striped", "floral", "plain", "long", "short",
    "sleeveless", "collared", "fitted", "loose", "darker", "brighter",
];

const FILLER_CAPTION: &str = "than the one shown";
const ROOT_NORM: f64 = 4.0;
const CHILDREN_PER_ROOT: usize = 14;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_items: usize,
    pub dim: usize,
    pub n_attrs: usize,
    pub n_triplets: usize,
    /// Standard deviation of the per-coordinate noise added to child items.
    pub noise: f64,
    /// Fraction of triplets assigned to the validation split.
    pub val_frac: f64,
    /// Fraction of captions whose attribute word gets an adjacent-character
    /// transposition, for exercising spell correction.
    pub misspell_frac: f64,
    /// Length of one attribute direction.
    pub amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_items: 990,
            dim: 16,
            n_attrs: 8,
            n_triplets: 500,
            noise: 0.01,
            val_frac: 0.2,
            misspell_frac: 0.0,
            amplitude: 2.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub features: FeatureStore,
    /// The same items mapped through a fixed random rotation: stand-in for
    /// features from an off-the-shelf instance-retrieval model.
    pub ir_features: FeatureStore,
    pub triplets: Vec<TripletRecord>,
    pub attr_words: Vec<String>,
}

fn item_id(i: usize) -> String {
    format!("item{i:05}")
}

/// Random rotation via Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (vi, ri) in v.iter_mut().zip(r) {
                *vi -= dot * ri;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            rows.push(v);
        }
    }
    rows
}

fn transpose_chars(word: &str, rng: &mut Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 4 {
        return word.to_string();
    }
    let i = rng.index(chars.len() - 1);
    let mut out = chars;
    out.swap(i, i + 1);
    out.into_iter().collect()
}

/// Attribute index combinations a child may be displaced along: all
/// unordered pairs, or the singletons when only one attribute exists.
fn attr_classes(n_attrs: usize) -> Vec<Vec<usize>> {
    if n_attrs < 2 {
        return (0..n_attrs).map(|j| vec![j]).collect();
    }
    let mut classes = Vec::with_capacity(n_attrs * (n_attrs - 1) / 2);
    for j in 0..n_attrs {
        for k in (j + 1)..n_attrs {
            classes.push(vec![j, k]);
        }
    }
    classes
}

pub fn synth_dataset(seed: u64, spec: &SynthSpec) -> Result<SynthData, DatastoreError> {
    if spec.n_items < 2 {
        return Err(DatastoreError::Invalid("n_items must be at least 2".into()));
    }
    if spec.n_attrs == 0 || spec.n_attrs > ATTRIBUTE_POOL.len() {
        return Err(DatastoreError::Invalid(format!(
            "n_attrs must be in 1..={}",
            ATTRIBUTE_POOL.len()
        )));
    }
    if spec.dim < spec.n_attrs {
        return Err(DatastoreError::Invalid("dim must be at least n_attrs".into()));
    }
    if spec.n_triplets == 0 {
        return Err(DatastoreError::Invalid("n_triplets must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.val_frac) {
        return Err(DatastoreError::Invalid("val_frac must be in [0, 1)".into()));
    }

    let mut rng = Rng::stream(seed, "synth", &[]);
    let attr_words: Vec<String> =
        ATTRIBUTE_POOL[..spec.n_attrs].iter().map(|s| s.to_string()).collect();
    let classes = attr_classes(spec.n_attrs);

    // Roots occupy the coordinates above the attribute block (all of them
    // when dim == n_attrs leaves no room) at a fixed norm.
    let n_roots = (spec.n_items / (CHILDREN_PER_ROOT + 1)).max(1);
    let root_lo = if spec.dim > spec.n_attrs { spec.n_attrs } else { 0 };
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(spec.n_items);
    let mut categories: Vec<Category> = Vec::with_capacity(spec.n_items);
    let mut edges: Vec<(usize, usize, usize)> = Vec::new(); // (root, child, class)

    for r in 0..n_roots {
        let mut v = vec![0.0; spec.dim];
        loop {
            for coord in v.iter_mut().skip(root_lo) {
                *coord = rng.normal();
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for coord in v.iter_mut() {
                    *coord *= ROOT_NORM / norm;
                }
                break;
            }
        }
        vectors.push(v);
        categories.push(Category::ALL[r % 3]);
    }

    // Each root consumes its own shuffled class order, so its children are
    // all displaced along distinct attribute pairs (until the classes run
    // out, which takes 28 children at 8 attributes).
    let n_children = spec.n_items - n_roots;
    let root_orders: Vec<Vec<usize>> = (0..n_roots)
        .map(|_| {
            let mut order: Vec<usize> = (0..classes.len()).collect();
            rng.shuffle(&mut order);
            order
        })
        .collect();
    for child in 0..n_children {
        let root = child % n_roots;
        let pass = child / n_roots;
        let class = root_orders[root][pass % classes.len()];
        let mut v = vectors[root].clone();
        for &attr in &classes[class] {
            v[attr] += spec.amplitude;
        }
        if spec.noise > 0.0 {
            for x in v.iter_mut() {
                *x += spec.noise * rng.normal();
            }
        }
        let idx = vectors.len();
        vectors.push(v);
        categories.push(categories[root]);
        edges.push((root, idx, class));
    }

    let mut features = FeatureStore::new();
    for (i, v) in vectors.iter().enumerate() {
        features.insert(FeatureVector {
            id: item_id(i),
            category: categories[i],
            values: v.clone(),
        })?;
    }

    let rotation = random_rotation(spec.dim, &mut rng);
    let mut ir_features = FeatureStore::new();
    for (i, v) in vectors.iter().enumerate() {
        let rotated: Vec<f64> = rotation
            .iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        ir_features.insert(FeatureVector {
            id: item_id(i),
            category: categories[i],
            values: rotated,
        })?;
    }

    // Triplets: sample edges with replacement; the caption names the child's
    // displaced attributes.
    let n_train = ((spec.n_triplets as f64) * (1.0 - spec.val_frac)).round() as usize;
    let mut triplets = Vec::with_capacity(spec.n_triplets);
    for k in 0..spec.n_triplets {
        let (root, child, class) = edges[rng.index(edges.len())];
        let mut words: Vec<String> =
            classes[class].iter().map(|&a| attr_words[a].clone()).collect();
        if spec.misspell_frac > 0.0 {
            for word in words.iter_mut() {
                if rng.uniform() < spec.misspell_frac {
                    *word = transpose_chars(word, &mut rng);
                }
            }
        }
        let joined = words.join(" and ");
        let main = if rng.uniform() < 0.5 {
            format!("is more {joined}")
        } else {
            format!("make it {joined}")
        };
        let mut captions = vec![main];
        if rng.uniform() < 0.3 {
            captions.push(FILLER_CAPTION.to_string());
        }
        triplets.push(TripletRecord {
            candidate_id: item_id(root),
            target_id: item_id(child),
            captions,
            category: categories[child],
            split: if k < n_train { Split::Train } else { Split::Val },
        });
    }

    Ok(SynthData { features, ir_features, triplets, attr_words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::validate_triplets;

    #[test]
    fn same_seed_is_identical() {
        let spec = SynthSpec { n_items: 60, n_triplets: 60, ..SynthSpec::default() };
        let a = synth_dataset(9, &spec).unwrap();
        let b = synth_dataset(9, &spec).unwrap();
        assert_eq!(a.triplets, b.triplets);
        for (x, y) in a.features.iter().zip(b.features.iter()) {
            assert_eq!(x, y);
        }
        for (x, y) in a.ir_features.iter().zip(b.ir_features.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_noise_targets_are_exact_attribute_sums() {
        let spec = SynthSpec { n_items: 75, n_triplets: 80, noise: 0.0, ..SynthSpec::default() };
        let data = synth_dataset(3, &spec).unwrap();
        for t in &data.triplets {
            let cand = &data.features.get(&t.candidate_id).unwrap().values;
            let targ = &data.features.get(&t.target_id).unwrap().values;
            let diffs: Vec<usize> = (0..cand.len()).filter(|&i| cand[i] != targ[i]).collect();
            assert_eq!(diffs.len(), 2, "triplet {t:?}");
            for &coord in &diffs {
                assert!(coord < spec.n_attrs);
                assert_eq!(targ[coord], cand[coord] + spec.amplitude);
                // The caption names the attribute word for this coordinate.
                let word = &data.attr_words[coord];
                assert!(
                    t.captions.iter().any(|c| c.contains(word.as_str())),
                    "caption {:?} must name `{word}`",
                    t.captions
                );
            }
        }
    }

    #[test]
    fn example_spec_produces_valid_resolvable_records() {
        let spec = SynthSpec {
            n_items: 100,
            dim: 16,
            n_attrs: 8,
            n_triplets: 400,
            ..SynthSpec::default()
        };
        let data = synth_dataset(123, &spec).unwrap();
        assert_eq!(data.triplets.len(), 400);
        assert_eq!(data.features.len(), 100);
        validate_triplets(&data.features, &data.triplets).unwrap();
        validate_triplets(&data.ir_features, &data.triplets).unwrap();
    }

    #[test]
    fn family_geometry_gives_margin_over_the_triplet_hinge() {
        // Same-root children sharing one attribute are the closest relatives;
        // their cosine distance to each other must exceed the default margin.
        let spec = SynthSpec { n_items: 150, n_triplets: 50, noise: 0.0, ..SynthSpec::default() };
        let data = synth_dataset(11, &spec).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let items: Vec<&crate::datastore::FeatureVector> = data.features.iter().collect();
        let mut checked = 0;
        for a in &items {
            for b in &items {
                if a.id >= b.id {
                    continue;
                }
                let c = cos(&a.values, &b.values);
                if c < 0.999 {
                    // Distinct items must sit further apart than the margin.
                    assert!(1.0 - c > 0.2, "{} vs {}: cos {c}", a.id, b.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn rotation_preserves_norms() {
        let spec = SynthSpec { n_items: 45, n_triplets: 30, ..SynthSpec::default() };
        let data = synth_dataset(5, &spec).unwrap();
        for (a, b) in data.features.iter().zip(data.ir_features.iter()) {
            let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((na - nb).abs() < 1e-9);
        }
    }

    #[test]
    fn misspelling_knob_produces_transpositions() {
        let spec = SynthSpec {
            n_items: 75,
            n_triplets: 200,
            misspell_frac: 0.5,
            ..SynthSpec::default()
        };
        let data = synth_dataset(2, &spec).unwrap();
        let clean: std::collections::HashSet<&str> =
            ATTRIBUTE_POOL.iter().copied().collect();
        let mut mangled = 0;
        for t in &data.triplets {
            for caption in &t.captions {
                for word in caption.split(' ') {
                    if !clean.contains(word)
                        && !["is", "more", "make", "it", "and", "than", "the", "one", "shown"]
                            .contains(&word)
                    {
                        mangled += 1;
                    }
                }
            }
        }
        assert!(mangled > 20, "only {mangled} misspellings");
    }

    #[test]
    fn parameter_validation() {
        assert!(synth_dataset(1, &SynthSpec { n_items: 1, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(1, &SynthSpec { dim: 4, n_attrs: 8, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(1, &SynthSpec { n_attrs: 0, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(1, &SynthSpec { val_frac: 1.0, ..SynthSpec::default() }).is_err());
    }
}

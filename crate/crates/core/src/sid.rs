//! Semantic item IDs via multi-level residual quantization.
//!
//! A codebook holds one k-means codebook per level; encoding greedily
//! assigns the nearest centroid and recurses on the residual. Levels after
//! the first pin code 0 to the zero vector, which makes per-point
//! reconstruction error provably non-increasing in depth: a deeper level
//! can always choose "no correction".
//!
//! Training data is canonicalized (sorted) before seeding, so the codebook
//! depends on the data multiset and the seed, never on input order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SidError {
    #[error("need at least {required} distinct embeddings, got {distinct}")]
    InsufficientData { distinct: usize, required: usize },
    #[error("embedding dimension {got} does not match codebook dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sid has {got} codes but the codebook has {expected} levels")]
    LevelMismatch { expected: usize, got: usize },
    #[error("code {code} at level {level} out of range 0..{max}")]
    CodeOutOfRange { level: usize, code: u32, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidCodebook {
    pub levels: usize,
    pub codes_per_level: usize,
    pub dim: usize,
    /// `centroids[level][code]` is one centroid vector of length `dim`.
    pub centroids: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sid {
    pub codes: Vec<u32>,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f32>], point: &[f32]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (idx, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best_dist {
            best_dist = d;
            best = idx;
        }
    }
    best
}

/// k-means++ seeding: first centroid drawn uniformly, the rest with
/// probability proportional to squared distance from the chosen set.
fn seed_centroids(points: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut dists: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass sits on the chosen centroids; any point do.
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dists.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let centroid = points[next].clone();
        for (i, p) in points.iter().enumerate() {
            dists[i] = dists[i].min(squared_distance(p, &centroid));
        }
        centroids.push(centroid);
    }
    centroids
}

/// Lloyd's algorithm. Empty clusters keep their previous centroid, which
/// keeps the run deterministic.
fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
    tol: f64,
) -> Vec<Vec<f32>> {
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(&centroids, p);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += *v as f64;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f32> =
                sums[c].iter().map(|s| (s / counts[c] as f64) as f32).collect();
            movement = movement.max(squared_distance(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if movement < tol {
            break;
        }
    }
    centroids
}

/// Trains a residual codebook: level 0 clusters the data, each deeper
/// level clusters the residuals left by the levels above it. Levels past
/// the first reserve code 0 for the zero vector.
pub fn train_codebook(
    embeddings: &[Vec<f32>],
    levels: usize,
    codes_per_level: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<SidCodebook, SidError> {
    assert!(levels >= 1 && codes_per_level >= 2, "degenerate codebook shape");
    let dim = embeddings.first().map_or(0, Vec::len);
    for e in embeddings {
        if e.len() != dim {
            return Err(SidError::DimensionMismatch { expected: dim, got: e.len() });
        }
    }
    // Canonical order makes training a function of the data multiset and
    // the seed; duplicates stay so frequent points keep their pull.
    let mut canonical: Vec<Vec<f32>> = embeddings.to_vec();
    canonical.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let distinct = {
        let mut unique = canonical.clone();
        unique.dedup();
        unique.len()
    };
    if distinct < codes_per_level {
        return Err(SidError::InsufficientData { distinct, required: codes_per_level });
    }

    let mut residuals = canonical;
    let mut centroids = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (level as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let level_centroids = if level == 0 {
            kmeans(&residuals, codes_per_level, &mut rng, max_iters, tol)
        } else {
            let mut learned =
                kmeans(&residuals, codes_per_level - 1, &mut rng, max_iters, tol);
            let mut with_zero = vec![vec![0.0f32; dim]];
            with_zero.append(&mut learned);
            with_zero
        };
        for r in residuals.iter_mut() {
            let c = nearest(&level_centroids, r);
            for (x, y) in r.iter_mut().zip(&level_centroids[c]) {
                *x -= *y;
            }
        }
        centroids.push(level_centroids);
    }
    Ok(SidCodebook { levels, codes_per_level, dim, centroids })
}

/// Greedy residual assignment: nearest centroid per level, recurse on what
/// remains.
pub fn encode(codebook: &SidCodebook, embedding: &[f32]) -> Result<Sid, SidError> {
    if embedding.len() != codebook.dim {
        return Err(SidError::DimensionMismatch {
            expected: codebook.dim,
            got: embedding.len(),
        });
    }
    let mut residual: Vec<f32> = embedding.to_vec();
    let mut codes = Vec::with_capacity(codebook.levels);
    for level_centroids in &codebook.centroids {
        let c = nearest(level_centroids, &residual);
        for (x, y) in residual.iter_mut().zip(&level_centroids[c]) {
            *x -= *y;
        }
        codes.push(c as u32);
    }
    Ok(Sid { codes })
}

/// Squared reconstruction error after each successive level, for the given
/// embedding. Non-increasing by construction.
pub fn level_errors(codebook: &SidCodebook, embedding: &[f32]) -> Result<Vec<f64>, SidError> {
    if embedding.len() != codebook.dim {
        return Err(SidError::DimensionMismatch {
            expected: codebook.dim,
            got: embedding.len(),
        });
    }
    let mut residual: Vec<f32> = embedding.to_vec();
    let mut errors = Vec::with_capacity(codebook.levels);
    for level_centroids in &codebook.centroids {
        let c = nearest(level_centroids, &residual);
        for (x, y) in residual.iter_mut().zip(&level_centroids[c]) {
            *x -= *y;
        }
        errors.push(residual.iter().map(|v| (*v as f64).powi(2)).sum());
    }
    Ok(errors)
}

/// Sum of the selected centroids across levels.
pub fn decode(codebook: &SidCodebook, sid: &Sid) -> Result<Vec<f32>, SidError> {
    if sid.codes.len() != codebook.levels {
        return Err(SidError::LevelMismatch {
            expected: codebook.levels,
            got: sid.codes.len(),
        });
    }
    let mut out = vec![0.0f32; codebook.dim];
    for (level, &code) in sid.codes.iter().enumerate() {
        let level_centroids = &codebook.centroids[level];
        if code as usize >= level_centroids.len() {
            return Err(SidError::CodeOutOfRange {
                level,
                code,
                max: level_centroids.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(&level_centroids[code as usize]) {
            *o += *v;
        }
    }
    Ok(out)
}

/// Level-tagged token text: one SID renders as "<sid_l0_3><sid_l1_1>...",
/// items join with ", ". Unambiguous to parse back.
pub fn format_sid_sequence(sids: &[Sid]) -> String {
    sids.iter()
        .map(|sid| {
            sid.codes
                .iter()
                .enumerate()
                .map(|(level, code)| format!("<sid_l{level}_{code}>"))
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Inverse of `format_sid_sequence`. None when the text deviates from the
/// token grammar.
pub fn parse_sid_sequence(text: &str) -> Option<Vec<Sid>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    let mut sids = Vec::new();
    for item in text.split(", ") {
        let mut codes = Vec::new();
        let mut rest = item;
        while !rest.is_empty() {
            let rest2 = rest.strip_prefix("<sid_l")?;
            let underscore = rest2.find('_')?;
            let level: usize = rest2[..underscore].parse().ok()?;
            if level != codes.len() {
                return None;
            }
            let after = &rest2[underscore + 1..];
            let end = after.find('>')?;
            let code: u32 = after[..end].parse().ok()?;
            codes.push(code);
            rest = &after[end + 1..];
        }
        if codes.is_empty() {
            return None;
        }
        sids.push(Sid { codes });
    }
    Some(sids)
}

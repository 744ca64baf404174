use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::KernelError;
use crate::geometry::{kernel_error, FeatureId, GeometricFeature, KernelKind, KernelTemplate};
use crate::Scalar;

/// Default upper bound on instances per frame.
pub const DEFAULT_CAP: usize = 2000;

/// One assignment of frame features to a template's nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInstance<T = f64> {
    pub kind: KernelKind,
    /// Positions of the node features in the frame, in template node order.
    pub nodes: Vec<usize>,
    pub ids: Vec<FeatureId>,
    /// Control error `E_k` of this assignment.
    pub error: Vec<T>,
    /// Relevance `b ∈ (0, 1)`, filled in by a forward pass.
    pub relevance: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration<T = f64> {
    pub instances: Vec<GraphInstance<T>>,
    /// Number of compatible assignments before capping.
    pub total: usize,
    pub capped: bool,
}

/// Lists the template instances of one frame.
///
/// Symmetric templates yield unordered combinations with nodes in ascending
/// feature-id order; asymmetric templates yield every role-compatible ordered
/// assignment. Above `cap` a seeded uniform subsample, kept in enumeration
/// order, is returned. Assignments whose control error is undefined (for
/// example coincident coplanarity points) are dropped.
pub fn enumerate_instances<T: Scalar>(
    frame: &[GeometricFeature<T>],
    template: &KernelTemplate,
    cap: usize,
    seed: u64,
) -> Result<Enumeration<T>, KernelError> {
    if cap == 0 {
        return Err(KernelError::Config("instance cap must be at least 1".into()));
    }
    let by_role: Vec<Vec<usize>> = template
        .roles
        .iter()
        .map(|&role| {
            let mut idx: Vec<usize> = (0..frame.len())
                .filter(|&i| frame[i].kind() == role)
                .collect();
            idx.sort_by_key(|&i| frame[i].id);
            idx
        })
        .collect();

    let n = template.arity();
    let mut tuples: Vec<usize> = Vec::new();
    if template.symmetric {
        combinations(&by_role[0], n, &mut tuples);
    } else {
        product(&by_role, &mut tuples);
    }
    let total = tuples.len() / n;

    let mut chosen: Vec<usize> = (0..total).collect();
    let capped = total > cap;
    if capped {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chosen = rand::seq::index::sample(&mut rng, total, cap).into_vec();
        chosen.sort_unstable();
    }

    let mut instances = Vec::with_capacity(chosen.len());
    for t in chosen {
        let nodes = tuples[t * n..(t + 1) * n].to_vec();
        let feats: Vec<&GeometricFeature<T>> = nodes.iter().map(|&i| &frame[i]).collect();
        match kernel_error(template.kind, &feats) {
            Ok(error) => instances.push(GraphInstance {
                kind: template.kind,
                ids: feats.iter().map(|f| f.id).collect(),
                nodes,
                error,
                relevance: None,
            }),
            Err(e) => log::debug!("skipping {} instance {:?}: {e}", template.kind, nodes),
        }
    }
    Ok(Enumeration {
        instances,
        total,
        capped,
    })
}

/// Lexicographic `k`-combinations of `pool`, flattened.
fn combinations(pool: &[usize], k: usize, out: &mut Vec<usize>) {
    if k == 0 || pool.len() < k {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.extend(idx.iter().map(|&i| pool[i]));
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + pool.len() - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Cartesian product over role pools without reusing a feature.
fn product(pools: &[Vec<usize>], out: &mut Vec<usize>) {
    fn rec(pools: &[Vec<usize>], prefix: &mut Vec<usize>, out: &mut Vec<usize>) {
        if prefix.len() == pools.len() {
            out.extend_from_slice(prefix);
            return;
        }
        for &i in &pools[prefix.len()] {
            if prefix.contains(&i) {
                continue;
            }
            prefix.push(i);
            rec(pools, prefix, out);
            prefix.pop();
        }
    }
    if pools.iter().any(Vec::is_empty) {
        return;
    }
    rec(pools, &mut Vec::with_capacity(pools.len()), out);
}

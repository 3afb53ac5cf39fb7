//! Finite cyclic group actions realized as exact (signed) entry permutations.
//!
//! Element `k` of a group of order `n` acts as the generator applied `k`
//! times; composition is addition mod `n`.

use alloc::sync::Arc;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generator of a cyclic action on tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    /// Mirror along the last axis.
    FlipH,
    /// Mirror along the second-to-last axis.
    FlipV,
    /// Quarter turn of the last two axes (square only).
    Rot90,
    /// Cyclic shift of the last axis by `shift`; `length` is the axis
    /// extent used to derive the order.
    CyclicTranslate { shift: usize, length: usize },
    /// Sign flip of every entry.
    Negate,
    /// Arbitrary permutation of the flattened entries: `out[i] = in[perm[i]]`.
    Permutation { perm: Vec<usize> },
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Transform {
    /// Order of the generator.
    pub fn order(&self) -> Result<usize> {
        Ok(match self {
            Transform::Identity => 1,
            Transform::FlipH | Transform::FlipV | Transform::Negate => 2,
            Transform::Rot90 => 4,
            Transform::CyclicTranslate { shift, length } => {
                if *length == 0 {
                    return Err(Error::invalid("cyclic translation needs a positive length"));
                }
                length / gcd(*length, shift % length)
            }
            Transform::Permutation { perm } => {
                validate_perm(perm)?;
                let mut seen = alloc::vec![false; perm.len()];
                let mut order = 1;
                for start in 0..perm.len() {
                    let mut len = 0;
                    let mut i = start;
                    while !seen[i] {
                        seen[i] = true;
                        i = perm[i];
                        len += 1;
                    }
                    if len > 0 {
                        order = order / gcd(order, len) * len;
                    }
                }
                order
            }
        })
    }

    /// Source index of every output entry for one generator application.
    fn generator_map(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let n: usize = shape.iter().product();
        let last = |k: usize| -> Result<usize> {
            if shape.len() < k {
                return Err(Error::invalid(alloc::format!("{self:?} needs at least {k} axes, got {shape:?}")));
            }
            Ok(shape[shape.len() - k])
        };
        Ok(match self {
            Transform::Identity | Transform::Negate => (0..n).collect(),
            Transform::FlipH => {
                let w = last(1)?;
                (0..n).map(|i| i - i % w + (w - 1 - i % w)).collect()
            }
            Transform::FlipV => {
                let (h, w) = (last(2)?, last(1)?);
                (0..n)
                    .map(|i| {
                        let (blk, r, c) = (i / (h * w), (i / w) % h, i % w);
                        blk * h * w + (h - 1 - r) * w + c
                    })
                    .collect()
            }
            Transform::Rot90 => {
                let (h, w) = (last(2)?, last(1)?);
                if h != w {
                    return Err(Error::invalid(alloc::format!("rot90 needs a square grid, got {h}x{w}")));
                }
                // out[r][c] = in[c][w - 1 - r]
                (0..n)
                    .map(|i| {
                        let (blk, r, c) = (i / (h * w), (i / w) % h, i % w);
                        blk * h * w + c * w + (w - 1 - r)
                    })
                    .collect()
            }
            Transform::CyclicTranslate { shift, length } => {
                let w = last(1)?;
                if w != *length {
                    return Err(Error::shape("cyclic-translate", &[*length], &[w]));
                }
                let s = shift % w;
                (0..n).map(|i| i - i % w + (i % w + w - s) % w).collect()
            }
            Transform::Permutation { perm } => {
                if perm.len() != n {
                    return Err(Error::shape("permutation", &[perm.len()], &[n]));
                }
                perm.clone()
            }
        })
    }
}

fn validate_perm(perm: &[usize]) -> Result<()> {
    let mut seen = alloc::vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || core::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("permutation must contain each index exactly once"));
        }
    }
    Ok(())
}

/// Configuration form of a [`GroupAction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GroupSpec {
    #[serde(flatten)]
    pub domain: Transform,
    /// Action on the codomain; defaults to the domain transform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codomain: Option<Transform>,
    /// Restrict random draws to these elements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<Vec<usize>>,
}

/// Paired actions `T_g` (domain) and `S_g` (codomain) of one cyclic group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroupSpec", into = "GroupSpec")]
pub struct GroupAction {
    order: usize,
    domain: Transform,
    codomain: Transform,
    subset: Option<Vec<usize>>,
}

impl TryFrom<GroupSpec> for GroupAction {
    type Error = Error;
    fn try_from(s: GroupSpec) -> Result<Self> {
        let codomain = s.codomain.unwrap_or_else(|| s.domain.clone());
        let mut a = GroupAction::paired(s.domain, codomain)?;
        if let Some(el) = s.elements {
            a = a.with_subset(el)?;
        }
        Ok(a)
    }
}

impl From<GroupAction> for GroupSpec {
    fn from(a: GroupAction) -> Self {
        let codomain = (a.codomain != a.domain).then_some(a.codomain);
        GroupSpec {
            domain: a.domain,
            codomain,
            elements: a.subset,
        }
    }
}

impl GroupAction {
    /// Same transform on both sides.
    pub fn new(t: Transform) -> Result<Self> {
        GroupAction::paired(t.clone(), t)
    }

    /// Distinct transforms sharing one group; their orders must agree.
    pub fn paired(domain: Transform, codomain: Transform) -> Result<Self> {
        let (a, b) = (domain.order()?, codomain.order()?);
        if a != b {
            return Err(Error::invalid(alloc::format!(
                "domain and codomain generators have orders {a} and {b}"
            )));
        }
        Ok(GroupAction {
            order: a,
            domain,
            codomain,
            subset: None,
        })
    }

    /// Translation by one on a length-`k` domain paired with translation by
    /// `d / k` on a length-`d` codomain.
    pub fn scaled_translation(k: usize, d: usize) -> Result<Self> {
        if k == 0 || d % k != 0 {
            return Err(Error::invalid("codomain length must be a multiple of the domain length"));
        }
        GroupAction::paired(
            Transform::CyclicTranslate { shift: 1, length: k },
            Transform::CyclicTranslate { shift: d / k, length: d },
        )
    }

    /// Restricts [`random_element`](Self::random_element) to `elements`.
    pub fn with_subset(mut self, elements: Vec<usize>) -> Result<Self> {
        if elements.is_empty() || elements.iter().any(|&e| e == 0 || e >= self.order) {
            return Err(Error::invalid("subset must list non-identity group elements"));
        }
        self.subset = Some(elements);
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> &Transform {
        &self.domain
    }

    pub fn codomain(&self) -> &Transform {
        &self.codomain
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn elements(&self) -> core::ops::Range<usize> {
        0..self.order
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        (a + b) % self.order
    }

    pub fn inverse(&self, g: usize) -> usize {
        (self.order - g % self.order) % self.order
    }

    /// Elements random draws are taken from.
    pub fn sampling_elements(&self) -> Vec<usize> {
        match &self.subset {
            Some(s) => s.clone(),
            None => (1..self.order).collect(),
        }
    }

    /// Uniform over non-identity elements (or the configured subset).
    pub fn random_element<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let pool = self.sampling_elements();
        if pool.is_empty() {
            return Err(Error::invalid("group has no non-identity element"));
        }
        Ok(pool[rng.random_range(0..pool.len())])
    }

    fn map_for(t: &Transform, g: usize, shape: &[usize]) -> Result<Arc<Vec<usize>>> {
        let gen = t.generator_map(shape)?;
        let mut map: Vec<usize> = (0..gen.len()).collect();
        for _ in 0..g {
            map = gen.iter().map(|&i| map[i]).collect();
        }
        Ok(Arc::new(map))
    }

    fn signed<'t>(t: &Transform, g: usize, v: Var<'t>) -> Result<Var<'t>> {
        if matches!(t, Transform::Negate) && g % 2 == 1 {
            v.neg()
        } else {
            Ok(v)
        }
    }

    fn signed_tensor(t: &Transform, g: usize, v: Tensor) -> Tensor {
        if matches!(t, Transform::Negate) && g % 2 == 1 {
            v.map(|x| -x)
        } else {
            v
        }
    }

    fn check_element(&self, g: usize) -> Result<()> {
        if g >= self.order {
            return Err(Error::invalid(alloc::format!("element {g} outside group of order {}", self.order)));
        }
        Ok(())
    }

    /// Index map of `T_g` (sign flips are applied separately) for tensors of `shape`.
    pub fn domain_map(&self, g: usize, shape: &[usize]) -> Result<Arc<Vec<usize>>> {
        self.check_element(g)?;
        Self::map_for(&self.domain, g, shape)
    }

    /// Index map of `S_g` for tensors of `shape`.
    pub fn codomain_map(&self, g: usize, shape: &[usize]) -> Result<Arc<Vec<usize>>> {
        self.check_element(g)?;
        Self::map_for(&self.codomain, g, shape)
    }

    pub fn apply_domain(&self, g: usize, z: &Tensor) -> Result<Tensor> {
        let out = z.gather(&self.domain_map(g, z.shape())?, z.shape())?;
        Ok(Self::signed_tensor(&self.domain, g, out))
    }

    pub fn apply_codomain(&self, g: usize, x: &Tensor) -> Result<Tensor> {
        let out = x.gather(&self.codomain_map(g, x.shape())?, x.shape())?;
        Ok(Self::signed_tensor(&self.codomain, g, out))
    }

    pub fn apply_domain_var<'t>(&self, g: usize, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        Self::signed(&self.domain, g, z.gather(self.domain_map(g, &shape)?, &shape)?)
    }

    pub fn apply_codomain_var<'t>(&self, g: usize, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        Self::signed(&self.codomain, g, x.gather(self.codomain_map(g, &shape)?, &shape)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w], (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn involutions_and_quarter_turns() {
        let x = grid(4, 4);
        let flip = GroupAction::new(Transform::FlipH).unwrap();
        let once = flip.apply_domain(1, &x).unwrap();
        assert_eq!(once.data()[..4], [3.0, 2.0, 1.0, 0.0]);
        assert_eq!(flip.apply_domain(1, &once).unwrap(), x);
        let rot = GroupAction::new(Transform::Rot90).unwrap();
        let mut y = x.clone();
        for _ in 0..4 {
            y = rot.apply_domain(1, &y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(rot.apply_domain(1, &x).unwrap(), x);
        assert_eq!(rot.apply_domain(2, &x).unwrap(), rot.apply_domain(1, &rot.apply_domain(1, &x).unwrap()).unwrap());
    }

    #[test]
    fn rot90_rejects_rectangles() {
        let rot = GroupAction::new(Transform::Rot90).unwrap();
        assert!(rot.apply_domain(1, &grid(3, 4)).is_err());
    }

    #[test]
    fn cyclic_shift_of_a_list() {
        let a = GroupAction::new(Transform::CyclicTranslate { shift: 1, length: 3 }).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.apply_domain(1, &x).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert_eq!(a.order(), 3);
    }

    #[test]
    fn scaled_translation_d4_k2() {
        let a = GroupAction::scaled_translation(2, 4).unwrap();
        assert_eq!(a.order(), 2);
        let z = Tensor::vector(vec![10.0, 20.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.apply_domain(1, &z).unwrap().data(), &[20.0, 10.0]);
        assert_eq!(a.apply_codomain(1, &x).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn permutation_order_is_cycle_lcm() {
        let t = Transform::Permutation { perm: vec![1, 2, 0, 4, 3] };
        assert_eq!(t.order().unwrap(), 6);
        assert!(Transform::Permutation { perm: vec![0, 0] }.order().is_err());
    }

    #[test]
    fn random_elements_exclude_identity() {
        let flip = GroupAction::new(Transform::FlipV).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| flip.random_element(&mut rng).unwrap() == 1));
        let id = GroupAction::new(Transform::Identity).unwrap();
        assert!(id.random_element(&mut rng).is_err());
        let sub = GroupAction::new(Transform::Rot90).unwrap().with_subset(vec![1, 3]).unwrap();
        assert!((0..100).all(|_| sub.random_element(&mut rng).unwrap() != 2));
    }

    #[test]
    fn spec_round_trip_via_serde() {
        let spec = GroupSpec {
            domain: Transform::CyclicTranslate { shift: 1, length: 8 },
            codomain: None,
            elements: None,
        };
        let a = GroupAction::try_from(spec.clone()).unwrap();
        assert_eq!(GroupSpec::from(a), spec);
    }
}

//! Spatial entropy of similarity maps and the auxiliary losses built from it.
//!
//! For one map `S`:
//!
//! ```text
//! m      = mean(S)
//! B      = relu(S - m)
//! C_1..r = 8-connected components of {B > 0}
//! u_j    = sum_{C_j} B + n_j * eps
//! P_j    = u_j / sum_i u_i
//! H      = -sum_j P_j ln P_j
//! ```
//!
//! The labeling is piecewise constant in `S`, so the gradient is taken with
//! the component masks frozen. Inside a region where the support does not
//! change, `dH/du_j = -(ln P_j + H) / U` with `U = sum_i u_i`, and every
//! support cell `c` of `C_j` has `dB_c/dS_a = [a == c] - 1/n` through the
//! mean. Off-support cells only see the mean term.

use crate::ccl::{connected_components, ComponentLabeling};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, MapKind, TaggedMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Added per support cell to component and total mass; keeps `ln P` finite.
    pub epsilon: f64,
    /// Treat the threshold mean as a constant when differentiating.
    pub detach_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1e-9, detach_mean: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EntropyResult {
    /// Spatial entropy in nats.
    pub entropy: f64,
    /// `P(C_j)` in label order.
    pub probabilities: Vec<f64>,
    /// `dH/dS`.
    pub gradient: Grid2D,
    pub components: ComponentLabeling,
    pub mean: f64,
    pub thresholded: Grid2D,
}

impl EntropyResult {
    pub fn component_count(&self) -> usize {
        self.components.count()
    }
}

/// Zeroes everything at or below the grid mean: returns `(relu(s - m), m)`.
///
/// Differences are taken against the first cell, so adding a constant that is
/// exact in binary leaves `b` bit-for-bit unchanged.
pub fn threshold_map(s: &Grid2D) -> (Grid2D, f64) {
    let v = s.values();
    let origin = v[0];
    let dev: Vec<f64> = v.iter().map(|x| x - origin).collect();
    let offset = dev.iter().sum::<f64>() / dev.len() as f64;
    let b = dev.iter().map(|d| (d - offset).max(0.0)).collect();
    (Grid2D::new(s.side(), b).expect("thresholding a finite grid stays finite"), origin + offset)
}

pub fn spatial_entropy(s: &Grid2D, cfg: &LossConfig) -> EntropyResult {
    let k = s.side();
    let (b, mean) = threshold_map(s);
    let components = connected_components(&b, 0.0);
    let count = components.count();
    if count == 0 {
        return EntropyResult {
            entropy: 0.0,
            probabilities: Vec::new(),
            gradient: Grid2D::zeros(k).expect("side already validated"),
            components,
            mean,
            thresholded: b,
        };
    }

    let eps = cfg.epsilon;
    let mut mass = components.component_masses(&b);
    for (u, &n) in mass.iter_mut().zip(components.sizes()) {
        *u += n as f64 * eps;
    }
    let total: f64 = mass.iter().sum();
    let probabilities: Vec<f64> = mass.iter().map(|u| u / total).collect();
    let entropy = -probabilities.iter().map(|&p| p * p.ln()).sum::<f64>();

    // dH/du_j, shared by every cell of component j
    let du: Vec<f64> = probabilities.iter().map(|&p| -(p.ln() + entropy) / total).collect();
    let mut grad: Vec<f64> = components
        .labels()
        .iter()
        .map(|&l| if l > 0 { du[l as usize - 1] } else { 0.0 })
        .collect();
    if !cfg.detach_mean {
        let through_mean = grad.iter().sum::<f64>() / grad.len() as f64;
        for g in &mut grad {
            *g -= through_mean;
        }
    }

    EntropyResult {
        entropy: entropy.max(0.0),
        probabilities,
        gradient: Grid2D::new(k, grad).expect("entropy gradient is finite"),
        components,
        mean,
        thresholded: b,
    }
}

fn check_heads(heads: &[Grid2D]) -> Result<usize> {
    let first = heads.first().ok_or(Error::NoHeads)?;
    let k = first.side();
    if let Some((i, g)) = heads.iter().enumerate().find(|(_, g)| g.side() != k) {
        return Err(Error::DimensionMismatch(format!("head {i} has side {}, head 0 has {k}", g.side())));
    }
    Ok(k)
}

/// Mean spatial entropy over heads and the per-head gradients of that mean.
pub fn spatial_entropy_loss(heads: &[Grid2D], cfg: &LossConfig) -> Result<(f64, Vec<Grid2D>)> {
    check_heads(heads)?;
    cfg.validate()?;
    let inv = 1.0 / heads.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(heads.len());
    for head in heads {
        let r = spatial_entropy(head, cfg);
        loss += r.entropy;
        grads.push(r.gradient.scale(inv)?);
    }
    Ok((loss * inv, grads))
}

/// [`spatial_entropy_loss`] on maps labeled with their extraction point;
/// post-softmax maps are refused.
pub fn spatial_entropy_loss_tagged(heads: &[TaggedMap], cfg: &LossConfig) -> Result<(f64, Vec<Grid2D>)> {
    if let Some(i) = heads.iter().position(|h| h.kind == MapKind::PostSoftmax) {
        return Err(Error::PostSoftmaxMap(i));
    }
    let grids: Vec<Grid2D> = heads.iter().map(|h| h.grid.clone()).collect();
    spatial_entropy_loss(&grids, cfg)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic total variation averaged over heads, with subgradient 0 at ties.
pub fn tv_loss(heads: &[Grid2D]) -> Result<(f64, Vec<Grid2D>)> {
    let k = check_heads(heads)?;
    let inv = 1.0 / heads.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(heads.len());
    for head in heads {
        let s = head.values();
        let mut g = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                let i = r * k + c;
                if c + 1 < k {
                    let d = s[i] - s[i + 1];
                    loss += d.abs();
                    g[i] += sign(d) * inv;
                    g[i + 1] -= sign(d) * inv;
                }
                if r + 1 < k {
                    let d = s[i] - s[i + k];
                    loss += d.abs();
                    g[i] += sign(d) * inv;
                    g[i + k] -= sign(d) * inv;
                }
            }
        }
        grads.push(Grid2D::new(k, g)?);
    }
    Ok((loss * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn grid(rows: &[&[f64]]) -> Grid2D {
        Grid2D::from_rows(rows).unwrap()
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn random_grid(rng: &mut ChaCha8Rng, side: usize) -> Grid2D {
        Grid2D::from_fn(side, |_, _| rng.gen_range(-2.0..2.0)).unwrap()
    }

    fn support(s: &Grid2D) -> Vec<bool> {
        threshold_map(s).0.values().iter().map(|&v| v > 0.0).collect()
    }

    #[test]
    fn threshold_examples() {
        let (b, m) = threshold_map(&grid(&[&[2.0, 2.0], &[0.0, 0.0]]));
        assert_eq!(m, 1.0);
        assert_eq!(b.values(), &[1.0, 1.0, 0.0, 0.0]);

        let (b, _) = threshold_map(&Grid2D::filled(4, 0.3).unwrap());
        assert!(b.values().iter().all(|&v| v == 0.0));

        let (b, m) = threshold_map(&grid(&[&[4.0, 0.0, 2.0], &[0.0; 3], &[0.0; 3]]));
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.get(0, 0) - 10.0 / 3.0).abs() < 1e-12);
        assert!((b.get(0, 2) - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.sum() - b.get(0, 0) - b.get(0, 2), 0.0);
    }

    #[test]
    fn single_component_has_zero_entropy() {
        let r = spatial_entropy(&grid(&[&[2.0, 2.0], &[0.0, 0.0]]), &cfg());
        assert_eq!(r.component_count(), 1);
        assert_eq!(r.probabilities, vec![1.0]);
        assert_eq!(r.entropy, 0.0);
    }

    #[test]
    fn two_equal_components() {
        let r = spatial_entropy(&grid(&[&[3.0, 0.0, 3.0], &[0.0; 3], &[0.0; 3]]), &cfg());
        assert_eq!(r.component_count(), 2);
        assert!((r.entropy - LN_2).abs() < 1e-12);
    }

    #[test]
    fn unequal_components() {
        let r = spatial_entropy(&grid(&[&[4.0, 0.0, 2.0], &[0.0; 3], &[0.0; 3]]), &cfg());
        assert!((r.probabilities[0] - 5.0 / 7.0).abs() < 1e-9);
        assert!((r.probabilities[1] - 2.0 / 7.0).abs() < 1e-9);
        let p: f64 = 5.0 / 7.0;
        let q: f64 = 2.0 / 7.0;
        assert!((r.entropy + p * p.ln() + q * q.ln()).abs() < 1e-9);
        assert!((r.entropy - 0.598_269_6).abs() < 1e-6);
    }

    #[test]
    fn constant_grid_is_empty_support() {
        let r = spatial_entropy(&Grid2D::filled(5, 1.5).unwrap(), &cfg());
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.component_count(), 0);
        assert!(r.gradient.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..50 {
            let s = random_grid(&mut rng, 6);
            let base_support = support(&s);
            let r = spatial_entropy(&s, &cfg());
            for i in 0..36 {
                let mut plus = s.values().to_vec();
                let mut minus = s.values().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let plus = Grid2D::new(6, plus).unwrap();
                let minus = Grid2D::new(6, minus).unwrap();
                if support(&plus) != base_support || support(&minus) != base_support {
                    continue;
                }
                let fd = (spatial_entropy(&plus, &cfg()).entropy - spatial_entropy(&minus, &cfg()).entropy) / (2.0 * h);
                let an = r.gradient.values()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel <= 1e-5, "cell {i}: analytic {an}, numeric {fd}");
                checked += 1;
            }
        }
        assert!(checked > 1500);
    }

    #[test]
    fn detached_mean_gradient_is_support_only() {
        let s = grid(&[&[4.0, 0.0, 2.0], &[0.0; 3], &[0.0; 3]]);
        let r = spatial_entropy(&s, &LossConfig { detach_mean: true, ..cfg() });
        assert_eq!(r.gradient.get(1, 1), 0.0);
        assert!(r.gradient.get(0, 0) != 0.0);
        let attached = spatial_entropy(&s, &cfg());
        assert!(attached.gradient.get(1, 1) != 0.0);
    }

    #[test]
    fn gradient_orthogonal_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = spatial_entropy(&random_grid(&mut rng, 8), &cfg());
            assert!(r.gradient.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn shift_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = random_grid(&mut rng, 7);
            let base = spatial_entropy(&s, &cfg());
            // shifts that are exact in binary keep every difference identical
            let c = rng.gen_range(-8i32..8) as f64 * 0.25;
            let shifted = spatial_entropy(&s.add_scalar(c).unwrap(), &cfg());
            assert_eq!(shifted.components, base.components);
            assert!((shifted.entropy - base.entropy).abs() < 1e-12);

            let a = rng.gen_range(0.5..10.0);
            let scaled = spatial_entropy(&s.scale(a).unwrap(), &cfg());
            assert!((scaled.entropy - base.entropy).abs() <= 1e-9);
            for (gs, gb) in scaled.gradient.values().iter().zip(base.gradient.values()) {
                assert!((gs * a - gb).abs() <= 1e-6 * (1.0 + gb.abs()));
            }
            let bound = (base.component_count().max(1) as f64).ln() + 1e-6;
            assert!(base.entropy >= 0.0 && base.entropy <= bound);
            assert!((base.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dyadic_shift_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s = Grid2D::from_fn(6, |_, _| rng.gen_range(-1024i32..=1024) as f64 / 256.0).unwrap();
            let c = rng.gen_range(-1024i32..=1024) as f64 / 16.0;
            let a = spatial_entropy(&s, &cfg());
            let b = spatial_entropy(&s.add_scalar(c).unwrap(), &cfg());
            assert_eq!(a.entropy.to_bits(), b.entropy.to_bits());
            assert_eq!(a.thresholded, b.thresholded);
            assert_eq!(a.gradient, b.gradient);
        }
    }

    #[test]
    fn bridging_components_does_not_raise_entropy() {
        // three blobs in a row; filling the gap between the first two merges them
        let mut rows = vec![vec![0.0; 9]; 9];
        for r in 3..6 {
            rows[r][1] = 1.0;
            rows[r][3] = 1.0;
            rows[r][7] = 1.0;
        }
        let split = Grid2D::from_rows(&rows).unwrap();
        let mut bridged = rows.clone();
        bridged[4][2] = 1.0;
        let bridged = Grid2D::from_rows(&bridged).unwrap();
        let a = spatial_entropy(&split, &cfg());
        let b = spatial_entropy(&bridged, &cfg());
        assert_eq!(a.component_count(), 3);
        assert_eq!(b.component_count(), 2);
        assert!(b.entropy <= a.entropy);
    }

    #[test]
    fn loss_is_mean_over_heads() {
        let zero = grid(&[&[2.0, 2.0], &[0.0, 0.0]]);
        let two = grid(&[&[3.0, 0.0, 3.0], &[0.0; 3], &[0.0; 3]]);
        let (l, _) = spatial_entropy_loss(&[zero.clone()], &cfg()).unwrap();
        assert_eq!(l, 0.0);
        assert!(spatial_entropy_loss(&[zero, two.clone()], &cfg()).is_err());

        let one = grid(&[&[3.0, 3.0, 0.0], &[0.0; 3], &[0.0; 3]]);
        let (l, g) = spatial_entropy_loss(&[one, two.clone()], &cfg()).unwrap();
        assert!((l - LN_2 / 2.0).abs() < 1e-12);
        let single = spatial_entropy(&two, &cfg());
        for (a, b) in g[1].values().iter().zip(single.gradient.values()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }

        let (l1, _) = spatial_entropy_loss(&[two.clone()], &cfg()).unwrap();
        let (l2, _) = spatial_entropy_loss(&[two.clone(), two], &cfg()).unwrap();
        assert_eq!(l1, l2);
        assert!(matches!(spatial_entropy_loss(&[], &cfg()), Err(Error::NoHeads)));
    }

    #[test]
    fn tagged_loss_refuses_post_softmax() {
        let g = grid(&[&[2.0, 2.0], &[0.0, 0.0]]);
        let pre = TaggedMap { kind: MapKind::PreSoftmax, grid: g.clone() };
        let post = TaggedMap { kind: MapKind::PostSoftmax, grid: g };
        assert!(spatial_entropy_loss_tagged(&[pre.clone()], &cfg()).is_ok());
        assert!(matches!(spatial_entropy_loss_tagged(&[pre, post], &cfg()), Err(Error::PostSoftmaxMap(1))));
    }

    #[test]
    fn bad_epsilon_rejected() {
        let g = grid(&[&[2.0, 2.0], &[0.0, 0.0]]);
        let bad = LossConfig { epsilon: 0.0, ..cfg() };
        assert!(spatial_entropy_loss(&[g], &bad).is_err());
    }

    #[test]
    fn tv_examples() {
        let (l, g) = tv_loss(&[Grid2D::filled(4, 2.0).unwrap()]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].values().iter().all(|&v| v == 0.0));
        let (l, _) = tv_loss(&[grid(&[&[0.0, 1.0], &[0.0, 1.0]])]).unwrap();
        assert_eq!(l, 2.0);
        assert!(matches!(tv_loss(&[]), Err(Error::NoHeads)));
    }

    #[test]
    fn tv_matches_double_loop_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = random_grid(&mut rng, 6);
            let (l, g) = tv_loss(&[s.clone()]).unwrap();
            let mut oracle = 0.0;
            for x in 0..6 {
                for y in 0..6 {
                    if y + 1 < 6 {
                        oracle += (s.get(x, y) - s.get(x, y + 1)).abs();
                    }
                    if x + 1 < 6 {
                        oracle += (s.get(x, y) - s.get(x + 1, y)).abs();
                    }
                }
            }
            assert!((l - oracle).abs() < 1e-12);
            for i in 0..36 {
                let h = 1e-7;
                let mut p = s.values().to_vec();
                p[i] += h;
                let lp = tv_loss(&[Grid2D::new(6, p).unwrap()]).unwrap().0;
                assert!(((lp - l) / h - g[0].values()[i]).abs() < 1e-5);
            }
        }
    }
}

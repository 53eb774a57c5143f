//! Learnable local aggregation of bottleneck features into normality
//! prototypes.
//!
//! Features are softly assigned to `L` trainable cluster centers (a learned
//! softmax over per-cluster affine responses, equivalent to a 1x1
//! convolution over the feature map). Weighted residual sums form a local
//! feature matrix; only the first `M` columns — the most-populated clusters
//! from the pre-clustering stage — become prototypes, leaving `G = L - M`
//! redundant clusters to soak up background mass. Prototypes are read back
//! per site through cosine matching weights and fused with the original
//! features for decoding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DiffError, PipelineError};
use crate::som::AcResult;
use crate::tape::{Session, Val};
use crate::tensor::{Element, ParamId, ParamStore, Tensor};

pub const NORM_EPS: f64 = 1e-12;

/// Initialization constants. `alpha` sharpens the initial assignment
/// responses; `proj_noise` is the scale of the perturbation on the
/// near-identity prototype projection.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeConfig {
    pub alpha: f64,
    pub proj_noise: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { alpha: 10.0, proj_noise: 0.01 }
    }
}

/// Trainable state: cluster centers, assignment affine map, and the shared
/// prototype projection.
#[derive(Clone, Debug)]
pub struct PrototypeNet {
    total_clusters: usize,
    kept: usize,
    dim: usize,
    pub centers: ParamId,
    pub assign_w: ParamId,
    pub assign_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Tape values produced by one aggregation pass.
pub struct ProtoOut {
    /// `(N, L)` soft assignments, rows sum to one.
    pub beta: Val,
    /// `(D, L)` residual aggregate.
    pub v: Val,
    /// `(M, D)` prototypes.
    pub p: Val,
    /// `(N, M)` matching weights, rows sum to one.
    pub w: Val,
    /// `(D, H, W)` prototype read-out.
    pub p_tilde: Val,
}

impl PrototypeNet {
    /// Builds the net from pre-clustering output: centers come straight
    /// from the clusterer, the assignment affine map from the closed forms
    /// `W_l = 2a c_l`, `b_l = -a ||c_l||^2`, and the projection starts near
    /// the identity.
    pub fn init_from_ac<E: Element>(
        store: &mut ParamStore<E>,
        ac: &AcResult<E>,
        cfg: PrototypeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, PipelineError> {
        let l = ac.centers.shape()[0];
        if ac.m < 1 {
            return Err(PipelineError::config("cluster count M must be at least 1"));
        }
        if ac.m > l {
            return Err(PipelineError::config(format!(
                "cluster count M={} exceeds total clusters L={l}",
                ac.m
            )));
        }
        Ok(Self::register(store, &ac.centers, ac.m, cfg, rng))
    }

    /// Random-initialization variant: `m` centers drawn from a unit
    /// Gaussian with no redundant clusters. Used by the fixed-count and
    /// random-init ablations.
    pub fn init_random<E: Element>(
        store: &mut ParamStore<E>,
        clusters: usize,
        kept: usize,
        dim: usize,
        cfg: PrototypeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, PipelineError> {
        if kept < 1 || kept > clusters {
            return Err(PipelineError::config(format!(
                "kept clusters {kept} outside [1, {clusters}]"
            )));
        }
        let centers = Tensor::from_fn(&[clusters, dim], |_| {
            E::from_f64(rng.sample::<f64, _>(StandardNormal))
        });
        Ok(Self::register(store, &centers, kept, cfg, rng))
    }

    fn register<E: Element>(
        store: &mut ParamStore<E>,
        centers: &Tensor<E>,
        kept: usize,
        cfg: PrototypeConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (l, d) = (centers.shape()[0], centers.shape()[1]);
        let alpha = E::from_f64(cfg.alpha);
        let two = E::from_f64(2.0);
        let assign_w = centers.map(|c| two * alpha * c);
        let mut assign_b = Tensor::zeros(&[l]);
        for li in 0..l {
            let row = &centers.data()[li * d..(li + 1) * d];
            let sq = row.iter().fold(E::zero(), |acc, &c| acc + c * c);
            assign_b.data_mut()[li] = -(alpha * sq);
        }
        let proj_w = Tensor::from_fn(&[d, d], |i| {
            let eye = if i / d == i % d { 1.0 } else { 0.0 };
            E::from_f64(eye + cfg.proj_noise * rng.sample::<f64, _>(StandardNormal))
        });
        let proj_b = Tensor::zeros(&[d]);

        Self {
            total_clusters: l,
            kept,
            dim: d,
            centers: store.register("proto.centers", centers.clone()),
            assign_w: store.register("proto.assign_w", assign_w),
            assign_b: store.register("proto.assign_b", assign_b),
            proj_w: store.register("proto.proj_w", proj_w),
            proj_b: store.register("proto.proj_b", proj_b),
        }
    }

    /// Rebuilds the handle from named checkpoint parameters already
    /// registered in `store`.
    pub fn from_store<E: Element>(
        store: &ParamStore<E>,
        kept: usize,
    ) -> Result<Self, PipelineError> {
        let centers = store
            .id_of("proto.centers")
            .ok_or_else(|| PipelineError::config("checkpoint lacks prototype parameters"))?;
        let shape = store.get(centers).value.shape().to_vec();
        Ok(Self {
            total_clusters: shape[0],
            kept,
            dim: shape[1],
            centers,
            assign_w: store
                .id_of("proto.assign_w")
                .ok_or_else(|| PipelineError::config("checkpoint lacks proto.assign_w"))?,
            assign_b: store
                .id_of("proto.assign_b")
                .ok_or_else(|| PipelineError::config("checkpoint lacks proto.assign_b"))?,
            proj_w: store
                .id_of("proto.proj_w")
                .ok_or_else(|| PipelineError::config("checkpoint lacks proto.proj_w"))?,
            proj_b: store
                .id_of("proto.proj_b")
                .ok_or_else(|| PipelineError::config("checkpoint lacks proto.proj_b"))?,
        })
    }

    pub fn clusters(&self) -> usize {
        self.total_clusters
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn redundant(&self) -> usize {
        self.total_clusters - self.kept
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Soft assignment of each site to every cluster: softmax over the
    /// learned affine responses.
    pub fn soft_assign<E: Element>(
        &self,
        sess: &mut Session<E>,
        sites: Val,
    ) -> Result<Val, DiffError> {
        let w = sess.param(self.assign_w);
        let b = sess.param(self.assign_b);
        let wt = sess.tape.transpose(w)?;
        let logits = sess.tape.matmul(sites, wt)?;
        let logits = sess.tape.bias_rows(logits, b)?;
        sess.tape.softmax_rows(logits)
    }

    /// Prototypes from the residual aggregate: keep the first `M` columns,
    /// normalize, and project.
    pub fn prototypes<E: Element>(&self, sess: &mut Session<E>, v: Val) -> Result<Val, DiffError> {
        let vt = sess.tape.transpose(v)?;
        let kept = sess.tape.take_rows(vt, self.kept)?;
        let normed = sess.tape.l2_normalize_rows(kept, NORM_EPS)?;
        let pw = sess.param(self.proj_w);
        let pb = sess.param(self.proj_b);
        let pwt = sess.tape.transpose(pw)?;
        let projected = sess.tape.matmul(normed, pwt)?;
        sess.tape.bias_rows(projected, pb)
    }

    /// Cosine matching weights between sites and prototypes, softmaxed per
    /// site.
    pub fn matching_weights<E: Element>(
        &self,
        sess: &mut Session<E>,
        sites: Val,
        p: Val,
    ) -> Result<Val, DiffError> {
        let sn = sess.tape.l2_normalize_rows(sites, NORM_EPS)?;
        let pn = sess.tape.l2_normalize_rows(p, NORM_EPS)?;
        let pnt = sess.tape.transpose(pn)?;
        let sims = sess.tape.matmul(sn, pnt)?;
        sess.tape.softmax_rows(sims)
    }

    /// Per-site convex combination of prototypes, shaped back to the
    /// feature-map layout.
    pub fn readout<E: Element>(
        &self,
        sess: &mut Session<E>,
        w: Val,
        p: Val,
        h: usize,
        width: usize,
    ) -> Result<Val, DiffError> {
        let sites_p = sess.tape.matmul(w, p)?;
        sess.tape.sites_to_chw(sites_p, h, width)
    }

    /// Full aggregation pass over a `(D, H, W)` feature map value.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        feature_map: Val,
    ) -> Result<(Val, ProtoOut), DiffError> {
        let (d, h, w) = sess.tape.value(feature_map).dims3("prototype_forward")?;
        if d != self.dim {
            return Err(DiffError::dim(
                "prototype_forward",
                format!("feature channels {d} vs prototype dim {}", self.dim),
            ));
        }
        let sites = sess.tape.chw_to_sites(feature_map)?;
        let beta = self.soft_assign(sess, sites)?;
        let centers = sess.param(self.centers);
        let v = sess.tape.aggregate_residuals(sites, beta, centers)?;
        let p = self.prototypes(sess, v)?;
        let weights = self.matching_weights(sess, sites, p)?;
        let p_tilde = self.readout(sess, weights, p, h, w)?;
        Ok((sites, ProtoOut { beta, v, p, w: weights, p_tilde }))
    }
}

/// Channel fusion of the feature map with its prototype read-out.
pub fn fuse<E: Element>(sess: &mut Session<E>, f: Val, p_tilde: Val) -> Result<Val, DiffError> {
    sess.tape.channel_concat(f, p_tilde)
}

/// Direct evaluation of the distance-kernel form of the soft assignment:
/// `exp(-alpha ||f - c_l||^2)` normalized over clusters. Used to validate
/// the learned affine form at initialization.
pub fn assignment_by_distance<E: Element>(
    f: &[E],
    centers: &Tensor<E>,
    alpha: f64,
) -> Vec<f64> {
    let (l, d) = (centers.shape()[0], centers.shape()[1]);
    let logits: Vec<f64> = (0..l)
        .map(|li| {
            let row = &centers.data()[li * d..(li + 1) * d];
            let sq: f64 = row
                .iter()
                .zip(f)
                .map(|(&c, &x)| {
                    let diff = x.to_f64() - c.to_f64();
                    diff * diff
                })
                .sum();
            -alpha * sq
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ac_with_centers(centers: Tensor<f64>, m: usize) -> AcResult<f64> {
        let l = centers.shape()[0];
        AcResult { m, centers, win_counts: vec![1; l] }
    }

    fn unit_rows(l: usize, d: usize, rng: &mut ChaCha20Rng) -> Tensor<f64> {
        let raw = Tensor::from_fn(&[l, d], |_| rng.gen_range(-1.0..1.0));
        crate::ops::l2_normalize_rows(&raw, 1e-12).unwrap()
    }

    #[test]
    fn init_closed_forms() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let centers = unit_rows(4, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers.clone(), 2),
            PrototypeConfig { alpha: 10.0, proj_noise: 0.0 },
            &mut rng,
        )
        .unwrap();
        // unit-norm centers: every b_l = -10
        for &b in store.get(net.assign_b).value.data() {
            assert!((b + 10.0).abs() < 1e-12);
        }
        let expect_w = centers.map(|c| 20.0 * c);
        assert!(store.get(net.assign_w).value.max_abs_diff(&expect_w) < 1e-12);
        // zero noise: projection is exactly the identity
        let pw = &store.get(net.proj_w).value;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(pw.data()[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn zero_center_row_gives_zero_affine() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut centers = unit_rows(3, 4, &mut rng);
        for j in 0..4 {
            centers.data_mut()[4 + j] = 0.0; // row 1
        }
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 3),
            PrototypeConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(store.get(net.assign_b).value.data()[1], 0.0);
        let wrow = &store.get(net.assign_w).value.data()[4..8];
        assert!(wrow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learned_form_matches_distance_kernel_at_init() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let centers = unit_rows(5, 6, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers.clone(), 3),
            PrototypeConfig { alpha: 10.0, proj_noise: 0.0 },
            &mut rng,
        )
        .unwrap();
        for _ in 0..100 {
            let f: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let mut sess = Session::new(&store);
            let sites = sess.tape.leaf(Tensor::new(&[1, 6], f.clone()).unwrap());
            let beta = net.soft_assign(&mut sess, sites).unwrap();
            let learned = sess.tape.value(beta).data().to_vec();
            let direct = assignment_by_distance(&f, &centers, 10.0);
            for (a, b) in learned.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_cluster_assignment_is_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let centers = unit_rows(1, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 1),
            PrototypeConfig::default(),
            &mut rng,
        )
        .unwrap();
        let mut sess = Session::new(&store);
        let sites = sess.tape.leaf(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
        let beta = net.soft_assign(&mut sess, sites).unwrap();
        for &b in sess.tape.value(beta).data() {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_centers_split_mass() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        // two mirrored centers plus one far-away
        let centers =
            Tensor::new(&[3, 2], vec![1.0, 0.0, -1.0, 0.0, 30.0, 30.0]).unwrap();
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 3),
            PrototypeConfig { alpha: 2.0, proj_noise: 0.0 },
            &mut rng,
        )
        .unwrap();
        let mut sess = Session::new(&store);
        let sites = sess.tape.leaf(Tensor::new(&[1, 2], vec![0.0, 0.7]).unwrap());
        let beta = net.soft_assign(&mut sess, sites).unwrap();
        let row = sess.tape.value(beta).data();
        assert!((row[0] - 0.5).abs() < 1e-9);
        assert!((row[1] - 0.5).abs() < 1e-9);
        assert!(row[2] < 1e-9);
    }

    #[test]
    fn prototypes_normalize_and_project() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let centers = unit_rows(2, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 2), // G = 0: all columns kept
            PrototypeConfig { alpha: 10.0, proj_noise: 0.0 },
            &mut rng,
        )
        .unwrap();
        let mut sess = Session::new(&store);
        // column 0 of V is (3,4,0)
        let v = sess.tape.leaf(Tensor::new(&[3, 2], vec![3.0, 0.0, 4.0, 1.0, 0.0, 0.0]).unwrap());
        let p = net.prototypes(&mut sess, v).unwrap();
        let row0 = &sess.tape.value(p).data()[..3];
        assert!((row0[0] - 0.6).abs() < 1e-12);
        assert!((row0[1] - 0.8).abs() < 1e-12);
        assert!(row0[2].abs() < 1e-12);
    }

    #[test]
    fn discarded_columns_do_not_affect_prototypes() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let centers = unit_rows(4, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 2), // G = 2 redundant clusters
            PrototypeConfig { alpha: 10.0, proj_noise: 0.01 },
            &mut rng,
        )
        .unwrap();
        let v0 = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let run = |v: &Tensor<f64>| {
            let mut sess = Session::new(&store);
            let vv = sess.tape.leaf(v.clone());
            let p = net.prototypes(&mut sess, vv).unwrap();
            sess.tape.value(p).clone()
        };
        let base = run(&v0);
        // perturb the trailing G columns arbitrarily
        let mut v1 = v0.clone();
        for j in 0..3 {
            v1.data_mut()[j * 4 + 2] += 100.0;
            v1.data_mut()[j * 4 + 3] -= 55.0;
        }
        let perturbed = run(&v1);
        assert!(base.max_abs_diff(&perturbed) == 0.0);
    }

    #[test]
    fn matching_weight_properties() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let centers = unit_rows(3, 4, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 3),
            PrototypeConfig::default(),
            &mut rng,
        )
        .unwrap();

        // single prototype: weights identically one
        let mut sess = Session::new(&store);
        let sites = sess.tape.leaf(Tensor::from_fn(&[5, 4], |i| (i as f64).cos()));
        let p1 = sess.tape.leaf(Tensor::from_fn(&[1, 4], |i| i as f64 + 1.0));
        let w = net.matching_weights(&mut sess, sites, p1).unwrap();
        for &v in sess.tape.value(w).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        // site parallel to prototype 1, orthogonal to 0 and 2
        let mut sess = Session::new(&store);
        let protos = sess.tape.leaf(
            Tensor::new(&[3, 4], vec![
                1.0, 0.0, 0.0, 0.0,
                0.0, 1.0, 0.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
            ])
            .unwrap(),
        );
        let site = sess.tape.leaf(Tensor::new(&[1, 4], vec![0.0, 3.0, 0.0, 0.0]).unwrap());
        let w = net.matching_weights(&mut sess, site, protos).unwrap();
        let row = sess.tape.value(w).data();
        assert!(row[1] > row[0] && row[1] > row[2]);

        // scale invariance of the site
        let mut sess = Session::new(&store);
        let protos2 = sess.tape.leaf(Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64) - 2.0));
        let s1 = sess.tape.leaf(Tensor::new(&[1, 4], vec![0.2, -0.4, 0.8, 0.1]).unwrap());
        let s5 = sess.tape.leaf(Tensor::new(&[1, 4], vec![1.0, -2.0, 4.0, 0.5]).unwrap());
        let w1 = net.matching_weights(&mut sess, s1, protos2).unwrap();
        let w5 = net.matching_weights(&mut sess, s5, protos2).unwrap();
        let d = sess.tape.value(w1).max_abs_diff(sess.tape.value(w5));
        assert!(d < 1e-12);
    }

    #[test]
    fn readout_selection_and_averaging() {
        let p = Tensor::<f64>::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let store = ParamStore::<f64>::new();
        let mut sess = Session::new(&store);
        let pv = sess.tape.leaf(p.clone());

        // one-hot on prototype 2 at every site
        let w = sess.tape.leaf(Tensor::from_fn(&[4, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 }));
        let out = sess.tape.matmul(w, pv).unwrap();
        let chw = sess.tape.sites_to_chw(out, 2, 2).unwrap();
        for s in 0..4 {
            assert_eq!(sess.tape.value(chw).data()[s], -1.0); // channel 0
            assert_eq!(sess.tape.value(chw).data()[4 + s], -1.0); // channel 1
        }

        // uniform weights give the mean prototype
        let w = sess.tape.leaf(Tensor::filled(&[4, 3], 1.0 / 3.0));
        let out = sess.tape.matmul(w, pv).unwrap();
        let mean0 = (1.0 + 0.0 - 1.0) / 3.0;
        for s in 0..4 {
            assert!((sess.tape.value(out).data()[s * 2] - mean0).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_stays_in_prototype_hull() {
        // with M = 3 prototypes in 2-D, solve barycentric coordinates and
        // verify they are a convex combination
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let p = Tensor::<f64>::new(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let raw = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-2.0..2.0));
        let w = softmax_rows(&raw).unwrap();
        let out = crate::ops::matmul(&w, &p).unwrap();
        for s in 0..6 {
            let (x, y) = (out.data()[s * 2], out.data()[s * 2 + 1]);
            // barycentric wrt the triangle (0,0),(1,0),(0,1)
            let (b1, b2) = (x, y);
            let b0 = 1.0 - b1 - b2;
            for c in [b0, b1, b2] {
                assert!(c >= -1e-9 && c <= 1.0 + 1e-9, "outside hull: {c}");
            }
        }
    }

    #[test]
    fn fuse_shapes_and_gradient_flow() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let centers = unit_rows(4, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let net = PrototypeNet::init_from_ac(
            &mut store,
            &ac_with_centers(centers, 4),
            PrototypeConfig::default(),
            &mut rng,
        )
        .unwrap();
        let mut sess = Session::new(&store);
        let f0 = Tensor::from_fn(&[3, 2, 2], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let f = sess.tape.leaf(f0);
        let (sites, out) = net.forward(&mut sess, f).unwrap();
        let fused = fuse(&mut sess, f, out.p_tilde).unwrap();
        assert_eq!(sess.tape.value(fused).shape(), &[6, 2, 2]);

        // both halves recover their sources
        let front = sess.tape.slice_channels(fused, 0, 3).unwrap();
        let back = sess.tape.slice_channels(fused, 3, 6).unwrap();
        assert!(sess.tape.value(front).max_abs_diff(sess.tape.value(f)) == 0.0);
        assert!(sess.tape.value(back).max_abs_diff(sess.tape.value(out.p_tilde)) == 0.0);

        // gradient reaches both the feature map and the prototype path
        let s = sess.tape.sum_all(fused);
        let grads = sess.tape.backward(s).unwrap();
        let gf = grads.get(f).unwrap();
        assert!(gf.data().iter().any(|&v| v != 0.0));
        let gc = grads.get(sess.param(net.centers)).unwrap();
        assert!(gc.data().iter().any(|&v| v != 0.0));
        let _ = sites;
    }

    #[test]
    fn rejects_zero_clusters() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let centers = unit_rows(3, 2, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let err = PrototypeNet::init_from_ac(
            &mut store,
            &AcResult { m: 0, centers, win_counts: vec![0; 3] },
            PrototypeConfig::default(),
            &mut rng,
        );
        assert!(err.is_err());
    }
}

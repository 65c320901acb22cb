//! Projection head: GELU MLP -> unit-norm bottleneck -> weight-normalized
//! prototype layer. No batch statistics anywhere, so one sample's output
//! never depends on its batch neighbors.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::trunc_normal_tensor;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Norm floor for the bottleneck and prototype directions.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    /// Linear layers in the MLP part (the weight-normed output layer is extra,
    /// so the total linear count is mlp_layers + 1).
    pub mlp_layers: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub out_dim: usize,
}

impl HeadConfig {
    /// Desk-scale defaults: 3-layer MLP, hidden 256, bottleneck 64, K = 1024.
    pub fn toy() -> Self {
        Self { mlp_layers: 3, hidden_dim: 256, bottleneck_dim: 64, out_dim: 1024 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_layers == 0 {
            return Err(Error::Param("head needs at least one MLP layer".into()));
        }
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 || self.out_dim == 0 {
            return Err(Error::Param("head dims must be positive".into()));
        }
        Ok(())
    }

    /// Column width of MLP layer `i` (its output side).
    fn layer_out(&self, i: usize) -> usize {
        if i + 1 == self.mlp_layers {
            self.bottleneck_dim
        } else {
            self.hidden_dim
        }
    }

    /// Head parameters, namespaced under "head." so they can share a ParamSet
    /// with the backbone. MLP weights and prototype directions are truncated
    /// normal (sigma 0.02), biases zero; the prototype layer has no bias and
    /// its gain is fixed at 1 by construction.
    pub fn init_params<T: Scalar>(&self, in_dim: usize, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
        self.validate()?;
        const STD: f64 = 0.02;
        let mut p = ParamSet::new();
        let mut d = in_dim;
        for i in 0..self.mlp_layers {
            let out = self.layer_out(i);
            p.insert(format!("head.mlp{i}.w"), trunc_normal_tensor(vec![d, out], STD, rng))?;
            p.insert(format!("head.mlp{i}.b"), Tensor::zeros(vec![1, out]))?;
            d = out;
        }
        p.insert("head.proto.v", trunc_normal_tensor(vec![self.out_dim, self.bottleneck_dim], STD, rng))?;
        Ok(p)
    }
}

/// Weight-normalized linear map: logits_i = <v_i / max(||v_i||, eps), x_row>.
/// Gain fixed at 1, no bias, so every logit of a unit-norm input lies in
/// [-1, 1].
pub fn weight_norm_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let dirs = tape.l2_normalize(v, NORM_EPS)?;
    tape.matmul_nt(x, dirs)
}

/// Head forward over a batch of row vectors [B x in_dim] -> logits [B x K].
/// GELU after every MLP layer except the last, then the l2 bottleneck, then
/// the prototype layer.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &HeadConfig,
    params: &BoundParams,
    x: TensorId,
) -> Result<TensorId> {
    cfg.validate()?;
    let mut h = x;
    for i in 0..cfg.mlp_layers {
        h = tape.matmul(h, params.id(&format!("head.mlp{i}.w"))?)?;
        h = tape.add_row(h, params.id(&format!("head.mlp{i}.b"))?)?;
        if i + 1 < cfg.mlp_layers {
            h = tape.gelu(h);
        }
    }
    let bottleneck = tape.l2_normalize(h, NORM_EPS)?;
    weight_norm_linear(tape, bottleneck, params.id("head.proto.v")?)
}

/// The bottleneck embedding alone (unit rows), occasionally useful for
/// diagnostics.
pub fn head_bottleneck<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &HeadConfig,
    params: &BoundParams,
    x: TensorId,
) -> Result<TensorId> {
    let mut h = x;
    for i in 0..cfg.mlp_layers {
        h = tape.matmul(h, params.id(&format!("head.mlp{i}.w"))?)?;
        h = tape.add_row(h, params.id(&format!("head.mlp{i}.b"))?)?;
        if i + 1 < cfg.mlp_layers {
            h = tape.gelu(h);
        }
    }
    tape.l2_normalize(h, NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform, DOMAIN_INIT};

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, DOMAIN_INIT, 7, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    fn forward_values(cfg: &HeadConfig, params: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let bound = params.bind_frozen(&mut tape);
        let xi = tape.constant(x.clone());
        let out = head_forward(&mut tape, cfg, &bound, xi).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn parameter_inventory_is_mlp_plus_prototype() {
        let cfg = HeadConfig::toy();
        let p = cfg.init_params::<f64>(64, &mut stream(1, DOMAIN_INIT, 0, 0)).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(
            names,
            vec![
                "head.mlp0.w", "head.mlp0.b",
                "head.mlp1.w", "head.mlp1.b",
                "head.mlp2.w", "head.mlp2.b",
                "head.proto.v",
            ]
        );
        assert_eq!(p.get("head.mlp0.w").unwrap().shape(), &[64, 256]);
        assert_eq!(p.get("head.mlp2.w").unwrap().shape(), &[256, 64]);
        assert_eq!(p.get("head.proto.v").unwrap().shape(), &[1024, 64]);
    }

    #[test]
    fn bottleneck_rows_are_unit_norm() {
        let cfg = HeadConfig::toy();
        let params = cfg.init_params::<f64>(64, &mut stream(2, DOMAIN_INIT, 0, 0)).unwrap();
        let x = rand_rows(8, 64, 3);
        let mut tape = Tape::inference();
        let bound = params.bind_frozen(&mut tape);
        let xi = tape.constant(x);
        let b = head_bottleneck(&mut tape, &cfg, &bound, xi).unwrap();
        let bv = tape.value(b);
        for i in 0..8 {
            let n: f64 = bv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {i} norm {n}");
        }
    }

    #[test]
    fn logits_are_bounded_by_one() {
        let cfg = HeadConfig::toy();
        let params = cfg.init_params::<f64>(64, &mut stream(4, DOMAIN_INIT, 0, 0)).unwrap();
        let out = forward_values(&cfg, &params, &rand_rows(6, 64, 5));
        for &v in out.data() {
            assert!(v.abs() <= 1.0 + 1e-12, "logit {v} escapes the unit interval");
        }
    }

    #[test]
    fn doubling_prototype_vectors_changes_nothing() {
        let cfg = HeadConfig::toy();
        let params = cfg.init_params::<f64>(64, &mut stream(6, DOMAIN_INIT, 0, 0)).unwrap();
        let x = rand_rows(4, 64, 7);
        let base = forward_values(&cfg, &params, &x);
        let mut doubled = params.clone();
        let v2 = doubled.get("head.proto.v").unwrap().map(|v| v * 2.0);
        doubled.set("head.proto.v", v2).unwrap();
        let out = forward_values(&cfg, &doubled, &x);
        assert!(out.bit_eq(&base));
    }

    #[test]
    fn orthonormal_prototypes_project_onto_basis() {
        let cfg = HeadConfig { mlp_layers: 1, hidden_dim: 4, bottleneck_dim: 4, out_dim: 4 };
        let mut params = cfg.init_params::<f64>(4, &mut stream(8, DOMAIN_INIT, 0, 0)).unwrap();
        // make the MLP the identity and the prototypes a scaled basis
        params.set("head.mlp0.w", Tensor::from_vec(vec![4, 4], vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]).unwrap()).unwrap();
        let mut basis = vec![0.0; 16];
        for i in 0..4 {
            basis[i * 4 + i] = 3.0; // scaling must not matter
        }
        params.set("head.proto.v", Tensor::from_vec(vec![4, 4], basis).unwrap()).unwrap();
        let x = Tensor::from_vec(vec![1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let out = forward_values(&cfg, &params, &x);
        // bottleneck normalizes x to e_0; prototypes are the basis -> e_0 logits
        assert!((out.get2(0, 0) - 1.0).abs() < 1e-12);
        for j in 1..4 {
            assert!(out.get2(0, j).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_are_independent_of_batch_company() {
        let cfg = HeadConfig::toy();
        let params = cfg.init_params::<f64>(64, &mut stream(10, DOMAIN_INIT, 0, 0)).unwrap();
        let x = rand_rows(5, 64, 11);
        let full = forward_values(&cfg, &params, &x);
        // row 2 alone
        let solo = forward_values(
            &cfg,
            &params,
            &crate::ops::narrow_rows(&x, 2, 1).unwrap(),
        );
        assert!(solo.bit_eq(&crate::ops::narrow_rows(&full, 2, 1).unwrap()));
        // duplicated batch: first copy identical
        let dup = crate::ops::concat_rows(&[&x, &x]).unwrap();
        let dup_out = forward_values(&cfg, &params, &dup);
        assert!(crate::ops::narrow_rows(&dup_out, 0, 5).unwrap().bit_eq(&full));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check_coords;
        let cfg = HeadConfig { mlp_layers: 2, hidden_dim: 6, bottleneck_dim: 4, out_dim: 5 };
        let params = cfg.init_params::<f64>(3, &mut stream(12, DOMAIN_INIT, 0, 0)).unwrap();
        let x = rand_rows(2, 3, 13);
        let weighting = rand_rows(2, 5, 14);
        let loss_of = |ps: &ParamSet<f64>| -> crate::error::Result<f64> {
            let mut tape = Tape::inference();
            let bound = ps.bind_frozen(&mut tape);
            let xi = tape.constant(x.clone());
            let out = head_forward(&mut tape, &cfg, &bound, xi)?;
            let w = tape.constant(weighting.clone());
            let prod = tape.mul(out, w)?;
            let s = tape.sum_all(prod);
            tape.value(s).item()
        };
        let mut tape = Tape::recording();
        let bound = params.bind(&mut tape);
        let xi = tape.constant(x.clone());
        let out = head_forward(&mut tape, &cfg, &bound, xi).unwrap();
        let w = tape.constant(weighting.clone());
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum_all(prod);
        tape.backward(s).unwrap();
        for name in ["head.mlp0.w", "head.mlp0.b", "head.mlp1.w", "head.proto.v"] {
            let xt = params.get(name).unwrap().clone();
            let analytic = tape.grad(bound.id(name).unwrap()).unwrap().clone();
            let coords: Vec<usize> = (0..xt.numel()).collect();
            let err = grad_check_coords(
                |cand| {
                    let mut ps = params.clone();
                    ps.set(name, cand.clone()).unwrap();
                    loss_of(&ps)
                },
                &xt,
                &analytic,
                &coords,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }
}

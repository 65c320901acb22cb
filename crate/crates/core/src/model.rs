//! Backbone + projection head as one named parameter set: the full network
//! g = h(f(x)) that both the student and the teacher instantiate.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::head::{head_forward, HeadConfig};
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ViTConfig, VitOut};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self { vit: ViTConfig::toy(), head: HeadConfig::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.head.validate()
    }

    /// One parameter set covering backbone then head; EMA, the optimizer, and
    /// checkpoints all iterate it in this order.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
        let mut p = self.vit.init_params::<T>(rng)?;
        for (name, t) in self.head.init_params::<T>(self.vit.dim, rng)?.iter() {
            p.insert(name, t.clone())?;
        }
        Ok(p)
    }
}

/// Weight decay applies to matrices only; biases and norm gains opt out.
pub fn decay_filter(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g"))
}

/// Forward one image through backbone and head: (backbone outputs, logits
/// [1 x K]).
pub fn image_logits<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &BoundParams,
    image: &Tensor<T>,
    collect_attn: bool,
) -> Result<(VitOut<T>, TensorId)> {
    let out = vit_forward(tape, &cfg.vit, params, image, collect_attn)?;
    let logits = head_forward(tape, &cfg.head, params, out.cls)?;
    Ok((out, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform, DOMAIN_INIT};

    #[test]
    fn combined_params_cover_backbone_and_head() {
        let cfg = ModelConfig::toy();
        let p = cfg.init_params::<f32>(&mut stream(1, DOMAIN_INIT, 0, 0)).unwrap();
        assert!(p.contains("patch.w"));
        assert!(p.contains("blk3.mlp2.w"));
        assert!(p.contains("head.proto.v"));
        // two inits from the same seed are bitwise identical
        let q = cfg.init_params::<f32>(&mut stream(1, DOMAIN_INIT, 0, 0)).unwrap();
        assert!(p.bit_eq(&q));
        // and a different seed is not
        let r = cfg.init_params::<f32>(&mut stream(2, DOMAIN_INIT, 0, 0)).unwrap();
        assert!(!p.bit_eq(&r));
    }

    #[test]
    fn decay_filter_spares_biases_and_gains() {
        assert!(decay_filter("patch.w"));
        assert!(decay_filter("head.proto.v"));
        assert!(decay_filter("cls"));
        assert!(decay_filter("pos"));
        assert!(!decay_filter("patch.b"));
        assert!(!decay_filter("blk0.ln1.g"));
        assert!(!decay_filter("norm.b"));
    }

    #[test]
    fn logits_shape_is_prototype_count() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params::<f64>(&mut stream(3, DOMAIN_INIT, 0, 0)).unwrap();
        let mut rng = stream(4, DOMAIN_INIT, 0, 0);
        let n = 3 * 16 * 16;
        let img = Tensor::from_vec(
            vec![3, 16, 16],
            (0..n).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::inference();
        let bound = params.bind_frozen(&mut tape);
        let (_, logits) = image_logits(&mut tape, &cfg, &bound, &img, false).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 1024]);
    }
}

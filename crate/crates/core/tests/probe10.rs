// calibration probe, not part of the suite; driven by env vars and deleted
// once the numbers are frozen.

use std::env;
use std::fs;

use dinolab::checkpoint::load_checkpoint;
use dinolab::config::RunConfig;
use dinolab::data::{render_sample, GenSpec};
use dinolab::eval::{attention_mask, cls_patch_attention, jaccard, mask_to_patch_grid};
use dinolab::vit::vit_forward;
use dinolab::rng::{stream, DOMAIN_INIT};
use dinolab::tape::Tape;

#[test]
fn probe_attention_jaccard() {
    let Ok(ckpt_path) = env::var("PROBE_CKPT") else {
        eprintln!("PROBE_CKPT unset; skipping");
        return;
    };
    let gen_path = env::var("PROBE_GEN").expect("PROBE_GEN");
    let ckpt = load_checkpoint::<f32>(ckpt_path.as_ref()).unwrap();
    let cfg = RunConfig::from_text(&ckpt.config_text).unwrap();
    let gspec = GenSpec::from_text(&fs::read_to_string(&gen_path).unwrap()).unwrap();
    let tspec = gspec.test_spec();

    let rand_params =
        cfg.model.init_params::<f32>(&mut stream(999, DOMAIN_INIT, 0, 0)).unwrap();
    let layer = cfg.model.vit.depth - 1;
    let heads = cfg.model.vit.heads;
    let side = tspec.side;
    let patch = cfg.model.vit.patch_size;

    let mut sums_t = vec![0.0f64; heads];
    let mut sums_r = vec![0.0f64; heads];
    let n = 100usize;
    for i in 0..n {
        let (img, _, gt) = render_sample(&tspec, 1, i);
        let gt_grid = mask_to_patch_grid(&gt, side, patch).unwrap();
        let x = img.to_tensor::<f32>();
        for (params, sums) in [(&ckpt.teacher, &mut sums_t), (&rand_params, &mut sums_r)] {
            let mut tape = Tape::<f32>::inference();
            let bound = params.bind_frozen(&mut tape);
            let vout = vit_forward(&mut tape, &cfg.model.vit, &bound, &x, true).unwrap();
            for h in 0..heads {
                let w = cls_patch_attention(&vout, layer, h).unwrap();
                let m = attention_mask(&w, 0.6).unwrap();
                sums[h] += jaccard(&m.keep, &gt_grid).unwrap();
            }
        }
    }
    let best = |s: &[f64]| s.iter().cloned().fold(f64::MIN, f64::max) / n as f64;
    for h in 0..heads {
        println!(
            "head {h}: trained {:.4}  random {:.4}",
            sums_t[h] / n as f64,
            sums_r[h] / n as f64
        );
    }
    println!("best trained {:.4}  best random {:.4}  gap {:.4}", best(&sums_t), best(&sums_r), best(&sums_t) - best(&sums_r));
}

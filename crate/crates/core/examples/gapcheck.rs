use dgl_core::denoiser::*;
use dgl_core::guidance::*;
use dgl_core::harness::*;
use dgl_core::tensor::GradTape;
use dgl_core::attention::{RisaMaskAxis, SfcaMaskSource};

fn one_backward(spec: &ScenarioSpec, sa_mult: f64, ca_mult: f64, v: f64, w: f64, seed: u64) -> (usize, bool, f64, f64) {
    let shape = spec.shape;
    let sa = ToyDenoiser::default_sa_scale(&shape) * sa_mult;
    let ca = ToyDenoiser::default_ca_scale(&shape) * ca_mult;
    let den = ToyDenoiser::with_scales(shape, spec.denoiser_seed, sa, ca).unwrap();
    let scen = spec.build(seed).unwrap();
    let mut cfg = GuidanceConfig::default();
    cfg.v = v; cfg.w = w;
    let sigma = cfg.sigmas[cfg.total_steps - 1];
    // z init as in sample_batch
    let sp = dgl_core::rng::SeedSplitter::new(seed);
    let z: Vec<_> = (0..2).map(|i| {
        let mut rng = sp.stream("init", &[i as u64]);
        dgl_core::rng::normal_tensor(&mut rng, &[shape.spatial(), shape.latent_dim])
    }).collect();
    let enhance = EnhanceOpts { risa: true, sfca: true, risa_axis: RisaMaskAxis::Key, sfca_source: SfcaMaskSource::Literal };
    // gradient norm at start
    let targets = build_targets(&den, &scen.conds, &cfg).unwrap();
    let mut tape = GradTape::new();
    let zn: Vec<_> = z.iter().map(|t| tape.leaf(t.clone())).collect();
    let cn: Vec<_> = scen.prompt_embeds.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut eval = layout_energy_eval(&den, &scen.conds, &targets, enhance);
    let ev = eval(&mut tape, &zn, &cn).unwrap();
    let mut tot = ev.energies[0];
    for &e in &ev.energies[1..] { tot = tape.add(tot, e).unwrap(); }
    let grads = tape.backward_scalar(tot).unwrap();
    let gz: f64 = zn.iter().map(|&n| grads.wrt(n).data().iter().map(|x| x*x).sum::<f64>()).sum::<f64>().sqrt();
    let gc: f64 = cn.iter().map(|&n| grads.wrt(n).data().iter().map(|x| x*x).sum::<f64>()).sum::<f64>().sqrt();

    let out = dual_backward_update(&z, &scen.prompt_embeds, &scen.conds, &den, &cfg, sigma, 1, enhance).unwrap();
    (out.trace.iterations, out.trace.converged, gz, gc)
}

fn main() {
    for (embed_scale, ca_m) in [(0.25, 1.0), (0.25, 1.5), (0.5, 1.0), (0.5, 1.5)] {
        let mut spec = ScenarioSpec::default();
        spec.embed_scale = embed_scale;
        println!("== embed={embed_scale} ca_m={ca_m}: v sweep (w=0.9) ==");
        for v in [3.0, 30.0, 300.0, 3000.0, 30000.0] {
            let mut iters = Vec::new();
            let mut conv = 0;
            for seed in 0..6 {
                let (it, c, _gz, _gc) = one_backward(&spec, 1.0, ca_m, v, 0.9, seed);
                iters.push(it);
                if c { conv += 1; }
            }
            println!("  v={v}: iters={iters:?} conv={conv}/6");
        }
        println!("  -- w sweep (v=300) --");
        for w in [0.009, 0.09, 0.9, 9.0, 90.0] {
            let mut iters = Vec::new();
            let mut conv = 0;
            for seed in 0..6 {
                let (it, c, _gz, _gc) = one_backward(&spec, 1.0, ca_m, 300.0, w, seed);
                iters.push(it);
                if c { conv += 1; }
            }
            println!("  w={w}: iters={iters:?} conv={conv}/6");
        }
    }
}

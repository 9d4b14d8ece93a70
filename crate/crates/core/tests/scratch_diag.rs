use xstr_core::autograd::Tape;
use xstr_core::model::{init_params, transformer_encoder_block, ModelConfig, Variant};
use xstr_core::params::{uniform_init, ParamSet};
use xstr_core::tensor::Tensor;

#[test]
fn diag_eps_sweep() {
    let mut cfg = ModelConfig::new(Variant::Sheng, 9);
    cfg.d_model = 8;
    cfg.d_ffn = 8;
    cfg.heads = 2;
    cfg.image_hw = (8, 16);
    cfg.max_len = 6;
    let params_base = init_params(&cfg, 5).unwrap();
    let input = uniform_init(&[3, 8], 1, 81, "input");
    let u = uniform_init(&[1, 3], 1, 7, "u");
    let v = uniform_init(&[8, 1], 1, 7, "v");

    let eval = |p: &ParamSet| -> (f32, Vec<(String, Tensor)>) {
        let mut tape = Tape::new();
        let s = tape.leaf(input.clone()).unwrap();
        let out = transformer_encoder_block(&mut tape, s, p, "enc.tblock.0", 2).unwrap();
        let un = tape.leaf(u.clone()).unwrap();
        let vn = tape.leaf(v.clone()).unwrap();
        let um = tape.matmul(un, out).unwrap();
        let loss = tape.matmul(um, vn).unwrap();
        let val = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let pairs = tape
            .param_grads(&grads)
            .into_iter()
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect();
        (val, pairs)
    };

    let mut params = params_base.clone();
    let (l0, analytic) = eval(&params);
    println!("loss scale {l0}");
    for eps in [0.00390625f32, 0.0078125] {
        // floor candidates as multiples of the loss-scale noise estimate
        for floor_mult in [1024.0f32, 2048.0, 4096.0, 8192.0] {
            let floor = floor_mult * f32::EPSILON * l0.abs().max(1.0) / (2.0 * eps);
            let mut worst = 0.0f64;
            let mut scored = 0usize;
            let mut skipped = 0usize;
            let names: Vec<String> = params.names().map(String::from).collect();
            for name in &names {
                if !name.starts_with("enc.tblock.0") { continue; }
                let numel = params.get(name).unwrap().numel();
                for c in 0..numel.min(12) {
                    let orig = params.get(name).unwrap().data()[c];
                    params.get_mut(name).unwrap().data_mut()[c] = orig + eps;
                    let (up, _) = eval(&params);
                    params.get_mut(name).unwrap().data_mut()[c] = orig - eps;
                    let (down, _) = eval(&params);
                    params.get_mut(name).unwrap().data_mut()[c] = orig;
                    let numeric = ((up as f64 - down as f64) / (2.0 * eps as f64)) as f32;
                    let a = analytic.iter().find(|(n, _)| n == name).map(|(_, g)| g.data()[c]).unwrap_or(0.0);
                    if a.abs() < floor && numeric.abs() < floor {
                        skipped += 1;
                        continue;
                    }
                    scored += 1;
                    let rel = ((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)) as f64;
                    if rel > worst { worst = rel; }
                }
            }
            println!("eps {eps:.7} floor_mult {floor_mult:>6} floor {floor:.2e}: worst {worst:.5} scored {scored} skipped {skipped}");
        }
    }
    panic!("done");
}

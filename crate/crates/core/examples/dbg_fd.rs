use maskplan::codec::MASK_TOKEN;
use maskplan::model::*;
use maskplan::tensor::*;

fn main() {
    let cfg = ModelConfig {
        d_model: 16, n_heads: 2, n_shared_blocks: 2, n_expert_blocks: 1,
        vocab_size: 30, max_context_len: 8, response_len: 6, mlp_ratio: 2,
        patch_size: 4, grid_size: 8, grid_channels: 2, strict_confinement: true,
    };
    let model = PlannerModel::new(cfg.clone(), 5).unwrap();
    let ctx = SceneContext {
        patches: Mat::from_fn(cfg.n_patches(), cfg.patch_dim(), |i, j| ((i * 3 + j) % 5) as f64 * 0.1 - 0.2),
        command: 2,
    };
    let mut resp = vec![MASK_TOKEN; 6];
    resp[1] = 9; resp[4] = 12;
    let targets: Vec<usize> = vec![8, 9, 10, 11, 12, 13];
    let weights = vec![0.3, 0.0, 0.5, 0.25, 0.0, 0.7];

    let eval_loss = |model: &PlannerModel| -> f64 {
        let mut tape = Tape::new();
        let item = BatchItem { ctx: &ctx, response: &resp };
        let logits = model.forward(&mut tape, &[item], ExpertId::Generation).unwrap();
        let loss = tape.cross_entropy_with_logits(logits, &targets, &weights).unwrap();
        tape.value(loss).item()
    };

    // analytic grads
    let mut m = model.clone();
    {
        let mut tape = Tape::new();
        let item = BatchItem { ctx: &ctx, response: &resp };
        let logits = m.forward(&mut tape, &[item], ExpertId::Generation).unwrap();
        let loss = tape.cross_entropy_with_logits(logits, &targets, &weights).unwrap();
        tape.backward(loss, &mut m.store).unwrap();
    }

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let n = m.store.len();
    for pid in 0..n {
        let id = ParamId(pid);
        let (name, count) = { let p = m.store.param(id); (p.name.clone(), p.data.len()) };
        // probe 3 entries per param
        for probe in 0..3usize {
            let idx = (probe * 7919) % count;
            let base = m.store.param(id).data[idx];
            let analytic = m.store.param(id).grad[idx];
            let mut plus = model.clone();
            let mut d = plus.store.param(id).data.to_vec(); d[idx] = base + h;
            plus.store.set_data(id, d);
            let mut minus = model.clone();
            let mut d = minus.store.param(id).data.to_vec(); d[idx] = base - h;
            minus.store.set_data(id, d);
            let fd = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-7);
            let rel = (fd - analytic).abs() / denom;
            if rel > worst { worst = rel; }
            if rel > 1e-3 {
                println!("BAD {name}[{idx}]: fd {fd:.8e} analytic {analytic:.8e} rel {rel:.2e}");
            }
        }
    }
    println!("worst relative error: {worst:.3e}");
}

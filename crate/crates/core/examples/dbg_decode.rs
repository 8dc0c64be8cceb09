use maskplan::codec::*;
use maskplan::diffusion::{sample, Schedule, ScheduleKind};
use maskplan::model::encode_context;
use maskplan::pipeline::{load_checkpoint, load_scenes, RunConfig};
use maskplan::rng::{derive, Stream};
use maskplan::sim::*;

fn main() {
    let cfg = RunConfig::default();
    let codec = cfg.codec();
    let (model, prog) = load_checkpoint(std::path::Path::new("/tmp/pilot/sft.ckpt")).unwrap();
    println!("progress: {prog:?}, optimizer step {}", model.store.step);
    let scenes = load_scenes(std::path::Path::new("/tmp/pilot/train32.jsonl")).unwrap();
    let sim_cfg = cfg.sim();
    let schedule = Schedule::new(ScheduleKind::Cosine, 12, codec.response_len());
    for scene in scenes.iter().take(3) {
        let grid = rasterize(scene, &sim_cfg);
        let ctx = encode_context(&grid, scene.command, &cfg.model());
        let mut rng = derive(1, Stream::Eval, &[0]);
        let out = sample(&model, &ctx, &schedule, 0.0, 4, &mut rng).unwrap();
        let expert = expert_plan(scene, &sim_cfg).unwrap();
        let expert_toks = encode_trajectory(&expert, &codec).unwrap();
        println!("scene {}:", scene.seed);
        println!("  sampled: {:?}", out.tokens);
        println!("  expert:  {:?}", expert_toks);
        match decode_trajectory(&out.tokens, &codec) {
            Ok(traj) => {
                let r = score(scene, &traj, &sim_cfg);
                println!("  decoded ok: pdms {:.3} nc {} dac {} ttc {} comfort {} ep {:.3}", r.pdms, r.nc, r.dac, r.ttc, r.comfort, r.ep);
                println!("  wp0 {:?} expert wp0 {:?}", traj.waypoints[0], expert.waypoints[0]);
            }
            Err(e) => println!("  decode error: {e}"),
        }
    }
}

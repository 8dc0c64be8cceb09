use maskplan::sim::*;
use maskplan::codec::Trajectory;

fn main() {
    let cfg = SimConfig::default();
    for seed in 0..100u64 {
        for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            let scene = generate_scene(seed, d, 4.0, 0.5, &cfg).unwrap();
            let traj = expert_plan(&scene, &cfg).unwrap();
            let r = score(&scene, &traj, &cfg);
            if r.pdms < 0.999 {
                println!("seed {seed} {d:?}: nc {} dac {} ttc {} comfort {} ep {:.3} pdms {:.3}", r.nc, r.dac, r.ttc, r.comfort, r.ep, r.pdms);
                if r.comfort == 0.0 {
                    let wps = &traj.waypoints;
                    let dt = scene.dt;
                    for k in 0..wps.len()-2 {
                        let ax = (wps[k+2].x - 2.0*wps[k+1].x + wps[k].x)/(dt*dt);
                        let ay = (wps[k+2].y - 2.0*wps[k+1].y + wps[k].y)/(dt*dt);
                        let a = (ax*ax+ay*ay).sqrt();
                        if a > 3.0 { println!("  accel[{k}] = {a:.3}"); }
                    }
                    for k in 0..wps.len()-1 {
                        let dy = ((wps[k+1].heading - wps[k].heading + 180.0).rem_euclid(360.0)-180.0).to_radians().abs()/dt;
                        if dy > 0.5 { println!("  yaw[{k}] = {dy:.3}  h{}={:.1} h{}={:.1}", k, wps[k].heading, k+1, wps[k+1].heading); }
                    }
                    let _ = Trajectory::new(wps.clone(), dt);
                }
            }
        }
    }
}

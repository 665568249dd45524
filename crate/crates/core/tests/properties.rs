use parkour_core::curriculum::update_level;
use parkour_core::dynamics::{forward_vector, standing_state, step, Action, DynamicsConfig, EnvFactors};
use parkour_core::rewards::{clearance_penalty, compute_metrics, stylized_reward, tracking_reward, RobotTrace};
use parkour_core::sensing::{
    render_depth, sample_scandots, BasePose, Camera, CameraPose, LatencyQueue, ScandotPattern, DEPTH_COLS,
    DEPTH_ROWS,
};
use parkour_core::terrain::{
    arrange_course, compute_edge_mask, generate_terrain, CourseSpec, Heightfield, TerrainKind, TerrainSpec,
    CELL_SIZE, EDGE_BAND, EDGE_HEIGHT_DELTA,
};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = TerrainKind> {
    prop::sample::select(TerrainKind::ALL.to_vec())
}

/// O(cells^2): a cell is masked when any cell within the band drops by more
/// than the threshold to one of its eight neighbours.
fn brute_force_mask(nx: usize, ny: usize, h: &[f32]) -> Vec<bool> {
    let at = |i: usize, j: usize| h[i * ny + j] as f64;
    let drops = |i: usize, j: usize| {
        (-1i64..=1).any(|a| {
            (-1i64..=1).any(|b| {
                let (p, q) = (i as i64 + a, j as i64 + b);
                (a, b) != (0, 0)
                    && p >= 0
                    && q >= 0
                    && (p as usize) < nx
                    && (q as usize) < ny
                    && at(i, j) - at(p as usize, q as usize) > EDGE_HEIGHT_DELTA
            })
        })
    };
    let sources: Vec<(usize, usize)> =
        (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).filter(|&(i, j)| drops(i, j)).collect();
    let mut out = vec![false; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            out[i * ny + j] = sources.iter().any(|&(a, b)| {
                let dx = (a as f64 - i as f64) * CELL_SIZE;
                let dy = (b as f64 - j as f64) * CELL_SIZE;
                (dx * dx + dy * dy).sqrt() <= EDGE_BAND + 1e-9
            });
        }
    }
    out
}

fn blocky_heights(nx: usize, ny: usize, levels: &[u8]) -> Vec<f32> {
    // coarse 4x4 blocks so drops form real edges
    (0..nx * ny)
        .map(|k| {
            let (i, j) = (k / ny / 4, k % ny / 4);
            levels[(i * 31 + j * 17) % levels.len()] as f32 * 0.04
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn edge_mask_matches_brute_force(nx in 2usize..=64, ny in 2usize..=64, levels in prop::collection::vec(0u8..6, 1..20)) {
        let h = blocky_heights(nx, ny, &levels);
        let hf = Heightfield::new(CELL_SIZE, nx, ny, [0.0, 0.0], h.clone()).unwrap();
        prop_assert_eq!(hf.edge_mask().to_vec(), brute_force_mask(nx, ny, &h));
    }

    #[test]
    fn mirroring_mirrors_the_mask(k in kind(), d in 0.0f64..=1.0, seed in 0u64..1000) {
        let (hf, _) = generate_terrain(&TerrainSpec::new(k, d, seed)).unwrap();
        let m = hf.mirrored_y();
        let recomputed = compute_edge_mask(&m, EDGE_BAND, EDGE_HEIGHT_DELTA);
        prop_assert_eq!(m.edge_mask(), &recomputed[..]);
        for ix in 0..hf.nx() {
            for iy in 0..hf.ny() {
                prop_assert_eq!(hf.is_edge(ix, iy), recomputed[m.index(ix, hf.ny() - 1 - iy)]);
            }
        }
    }

    #[test]
    fn terrain_is_deterministic_and_monotone(k in kind(), d in 0.0f64..=1.0, e in 0.0f64..=1.0, seed in 0u64..1000) {
        let spec = TerrainSpec::new(k, d, seed);
        prop_assert_eq!(generate_terrain(&spec).unwrap(), generate_terrain(&spec).unwrap());
        let (lo, hi) = if d <= e { (d, e) } else { (e, d) };
        prop_assert!(k.severity(lo) <= k.severity(hi));
    }

    #[test]
    fn waypoints_sit_on_ground(kinds in prop::collection::vec(kind(), 1..4), levels in 1usize..4, seed in 0u64..1000) {
        let mut spec = CourseSpec::new(kinds, levels);
        spec.seed = seed;
        let (hf, course) = arrange_course(&spec).unwrap();
        for w in &course.waypoints {
            let h = hf.height_at(w[0], w[1]);
            prop_assert!(h.is_finite());
            prop_assert!(hf.height_nearest(w[0], w[1]) > -0.5, "waypoint in a gap at {:?}", w);
        }
    }

    #[test]
    fn flight_is_ballistic(vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -1.0f64..3.0) {
        let cfg = DynamicsConfig::default();
        let hf = Heightfield::flat(0.0, 40.0, 40.0, [-20.0, -20.0]).unwrap();
        let mut s = standing_state(&hf, 0.0, 0.0, 0.0, &cfg);
        s.base_pos[2] = 5.0;
        for f in &mut s.feet {
            f[2] += 5.0;
        }
        s.contacts = [false; 4];
        s.base_vel = [vx, vy, vz];
        let z0 = s.base_pos[2];
        let mut t = 0.0;
        while !s.supported() && t < 1.0 {
            s = step(&s, &Action::default(), &hf, &EnvFactors::default(), &cfg).unwrap();
            t += cfg.dt;
            prop_assert!((s.base_vel[0] - vx).abs() < 1e-9 && (s.base_vel[1] - vy).abs() < 1e-9);
            let analytic = z0 + vz * t - 0.5 * cfg.gravity * t * t;
            prop_assert!((s.base_pos[2] - analytic).abs() <= cfg.gravity * cfg.dt * t + 1e-9);
        }
    }

    #[test]
    fn feet_stay_above_ground(
        k in kind(),
        d in 0.0f64..=1.0,
        seed in 0u64..100,
        actions in prop::collection::vec(prop::array::uniform12(-1.5f64..1.5), 1..80),
    ) {
        let cfg = DynamicsConfig::default();
        let (hf, course) = generate_terrain(&TerrainSpec::new(k, d, seed)).unwrap();
        let w = course.waypoints[0];
        let mut s = standing_state(&hf, w[0], w[1], 0.0, &cfg);
        let factors = EnvFactors::default();
        for a in actions {
            let a = Action(a);
            let next = step(&s, &a, &hf, &factors, &cfg).unwrap();
            prop_assert_eq!(&next, &step(&s, &a, &hf, &factors, &cfg).unwrap());
            for f in &next.feet {
                prop_assert!(f[2] >= hf.height_at(f[0], f[1]) - 0.01);
            }
            let fwd = forward_vector(&next);
            prop_assert!((fwd.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            s = next;
        }
    }

    #[test]
    fn idle_contact_dissipates(vx in -3.0f64..3.0, vy in -3.0f64..3.0, friction in 0.2f64..1.5) {
        let cfg = DynamicsConfig::default();
        let hf = Heightfield::flat(0.0, 40.0, 40.0, [-20.0, -20.0]).unwrap();
        let mut s = standing_state(&hf, 0.0, 0.0, 0.3, &cfg);
        s.base_vel = [vx, vy, 0.0];
        let factors = EnvFactors { friction, ..EnvFactors::default() };
        for _ in 0..50 {
            if !s.supported() {
                break;
            }
            let next = step(&s, &Action::default(), &hf, &factors, &cfg).unwrap();
            prop_assert!(next.kinetic_energy() <= s.kinetic_energy() + 1e-12);
            s = next;
        }
    }

    #[test]
    fn latency_never_releases_early(
        latency in 0.0f64..0.2,
        ops in prop::collection::vec((0.0f64..0.05, any::<bool>()), 1..200),
    ) {
        let mut q = LatencyQueue::new(latency);
        let mut now = 0.0;
        for (dt, push) in ops {
            now += dt;
            if push {
                q.push(now, now).unwrap();
            } else if let Some(enqueued) = q.poll(now).unwrap() {
                prop_assert!(enqueued + latency <= now + 1e-12);
            }
        }
    }

    #[test]
    fn approaching_a_wall_never_lengthens_wall_hits(x0 in -0.8f64..0.4, dx in 0.0f64..0.3, z in 0.15f64..0.4) {
        // ground at 0, a 1 m wall from x = 1.5 on
        let (nx, ny) = (161, 81);
        let h: Vec<f32> = (0..nx * ny).map(|k| if k / ny >= 100 { 1.0 } else { 0.0 }).collect();
        let hf = Heightfield::new(CELL_SIZE, nx, ny, [-1.0, -1.0], h).unwrap();
        let cam = Camera::default();
        let far_pose = CameraPose { position: [x0, 0.0, z], ..Default::default() };
        let near_pose = CameraPose { position: [x0 + dx, 0.0, z], ..Default::default() };
        for row in 0..DEPTH_ROWS {
            for col in 0..DEPTH_COLS {
                let dir = cam.pixel_ray(&far_pose, row, col, DEPTH_ROWS, DEPTH_COLS);
                let r_far = cam.cast_ray(&hf, far_pose.position, dir);
                let r_near = cam.cast_ray(&hf, near_pose.position, dir);
                let hit_x = x0 + r_far * dir[0];
                let on_wall = r_far < cam.far && x0 + r_far * dir[0] >= 1.5 - CELL_SIZE
                    && far_pose.position[2] + r_far * dir[2] > 0.01;
                if on_wall && hit_x.is_finite() {
                    prop_assert!(r_near <= r_far + 1e-9, "pixel ({}, {}): {} > {}", row, col, r_near, r_far);
                }
            }
        }
    }

    #[test]
    fn flat_plane_render_matches_analytic(z in 0.1f64..0.6, pitch in 0.2f64..1.2, yaw in -3.0f64..3.0) {
        let hf = Heightfield::flat(0.0, 12.0, 12.0, [-6.0, -6.0]).unwrap();
        let cam = Camera::default();
        let pose = CameraPose { position: [0.0, 0.0, z], yaw, pitch, roll: 0.0 };
        let img = render_depth(&hf, &pose, &cam, 0.0);
        prop_assert_eq!(img.values().len(), DEPTH_ROWS * DEPTH_COLS);
        for row in 0..DEPTH_ROWS {
            for col in 0..DEPTH_COLS {
                let dir = cam.pixel_ray(&pose, row, col, DEPTH_ROWS, DEPTH_COLS);
                let analytic = if dir[2] < 0.0 { (z / -dir[2]).clamp(cam.near, cam.far) } else { cam.far };
                let got = img.at(row, col) as f64;
                prop_assert!(got >= cam.near as f32 as f64 && got <= cam.far as f32 as f64);
                // f32 storage adds at most ~1e-7 relative
                prop_assert!((got - analytic).abs() < f64::max(1e-4, cam.march_step), "{} vs {}", got, analytic);
            }
        }
    }

    #[test]
    fn scandots_rotate_with_the_terrain(n in 5usize..40, seed in any::<u64>(), px in -0.3f64..0.3, py in -0.3f64..0.3, yaw in -3.0f64..3.0) {
        let mut r = seed;
        let h: Vec<f32> = (0..n * n).map(|_| {
            r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((r >> 40) as f32 / (1u64 << 24) as f32) * 0.4
        }).collect();
        let m = (n - 1) as f64 / 2.0;
        let origin = [-m * CELL_SIZE, -m * CELL_SIZE];
        let hf = Heightfield::new(CELL_SIZE, n, n, origin, h.clone()).unwrap();
        // rotate a quarter turn counter-clockwise about the grid centre
        let mut rot = vec![0.0f32; n * n];
        for ix in 0..n {
            for iy in 0..n {
                rot[(n - 1 - iy) * n + ix] = h[ix * n + iy];
            }
        }
        let hr = Heightfield::new(CELL_SIZE, n, n, origin, rot).unwrap();
        let pattern = ScandotPattern::grid(6, 5, (-0.2, 0.3), (-0.2, 0.2));
        let pose = BasePose { x: px, y: py, z: 0.3, yaw };
        let turned = BasePose { x: -py, y: px, z: 0.3, yaw: yaw + std::f64::consts::FRAC_PI_2 };
        let a = sample_scandots(&hf, &pose, &pattern);
        let b = sample_scandots(&hr, &turned, &pattern);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn tracking_is_bounded(v in prop::array::uniform2(-5.0f64..5.0), th in -4.0f64..4.0, v_cmd in 0.0f64..3.0) {
        prop_assert!(tracking_reward(v, [th.cos(), th.sin()], v_cmd) <= v_cmd);
    }

    #[test]
    fn tracking_is_rotation_invariant(v in prop::array::uniform2(-5.0f64..5.0), th in -4.0f64..4.0, rot in -7.0f64..7.0, v_cmd in 0.0f64..3.0) {
        let d = [th.cos(), th.sin()];
        let (s, c) = rot.sin_cos();
        let r = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        prop_assert!((tracking_reward(v, d, v_cmd) - tracking_reward(r(v), r(d), v_cmd)).abs() < 1e-9);
    }

    #[test]
    fn clearance_counts_feet(contacts in prop::array::uniform4(any::<bool>()), edges in prop::array::uniform4(any::<bool>())) {
        let feet = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let p = clearance_penalty(&contacts, &feet, |x, _| edges[x as usize]);
        prop_assert!([0.0, -1.0, -2.0, -3.0, -4.0].contains(&p));
    }

    #[test]
    fn stylized_in_unit_interval(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0), w in any::<bool>()) {
        let unit = |v: [f64; 3]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            v.map(|x| x / n)
        };
        let (f, c) = (unit(a), unit(b));
        let r = stylized_reward(f, c, w);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        if !w {
            prop_assert_eq!(r, 0.0);
        }
        prop_assert!((stylized_reward(c, c, true) - 1.0).abs() < 1e-12);
        let gap = f.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        if gap > 1e-6 && w {
            prop_assert!(r < 1.0);
        }
    }

    #[test]
    fn metrics_in_range(traces in prop::collection::vec((0usize..20, prop::collection::vec(0u8..=4, 0..30)), 1..20)) {
        let (_, course) = arrange_course(&CourseSpec::new(vec![TerrainKind::Hurdle], 2)).unwrap();
        let traces: Vec<RobotTrace> = traces.into_iter().map(|(m, e)| RobotTrace { max_waypoint: m, edge_contacts: e }).collect();
        let m = compute_metrics(&traces, &course).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.mxd_mean));
        prop_assert!(m.mev_mean >= 0.0);
        prop_assert_eq!(m, compute_metrics(&traces, &course).unwrap());
    }

    #[test]
    fn curriculum_stays_in_bounds(
        start in 0usize..3,
        outcomes in prop::collection::vec((0.0f64..6.0, 0.2f64..1.2), 1..100),
    ) {
        let (max, seg, t) = (2, 4.0, 8.0);
        let mut level = start;
        for (traversed, v_cmd) in outcomes {
            let next = update_level(level, max, traversed, seg, v_cmd, t);
            prop_assert!(next <= max);
            prop_assert!(next.abs_diff(level) <= 1);
            level = next;
        }
    }
}

#[test]
fn full_traversal_reaches_top_in_max_level_episodes() {
    for max in 0..6 {
        let mut level = 0;
        for episode in 1..=max {
            level = update_level(level, max, 4.0, 4.0, 0.8, 8.0);
            assert_eq!(level, episode);
        }
        assert_eq!(level, max);
    }
}

#[test]
fn idle_robot_sinks_to_zero() {
    for start in 0..6 {
        let mut level = start;
        for _ in 0..start {
            level = update_level(level, 5, 0.0, 4.0, 0.8, 8.0);
        }
        assert_eq!(level, 0);
        assert_eq!(update_level(level, 5, 0.0, 4.0, 0.8, 8.0), 0);
    }
}

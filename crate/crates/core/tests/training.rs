use longtail::checkpoint::{from_bytes, to_bytes};
use longtail::data::{
    compute_class_stats, generate_synthetic, synthetic_split, Dataset, SplitSpec, SyntheticSpec,
};
use longtail::heads::{
    bags_infer, bags_train_heads, build_group_layout, build_group_layout_with_limits, GroupLimit,
    LayoutKind,
};
use longtail::losses::{softmax, LossSpec};
use longtail::matrix::Matrix;
use longtail::model::{
    predict, train_linear_head, train_stage1, train_stage2, Architecture, BalanceParams, Heads,
    Method,
};
use longtail::optim::{lr_at, optimizer_step, OptimSpec, OptimState};

fn optim(epochs: usize, seed: u64) -> OptimSpec {
    OptimSpec {
        epochs,
        warmup_epochs: 1,
        ..OptimSpec::stage1()
    }
    .with_seed(seed)
}

fn data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_classes: 5,
        feature_dim: 4,
        head_count: 300,
        imbalance_factor: 30.0,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn adamw_minimizes_a_convex_quadratic() {
    // f(x) = sum_k a_k (x_k - c_k)^2
    let a = [1.0, 4.0, 0.25, 9.0];
    let c = [3.0, -2.0, 0.5, 1.0];
    let f = |x: &[f64]| -> f64 {
        x.iter()
            .zip(a.iter().zip(&c))
            .map(|(x, (a, c))| a * (x - c).powi(2))
            .sum()
    };
    let mut x = vec![0.0; 4];
    let start = f(&x);
    let spec = OptimSpec {
        weight_decay: 0.0,
        ..OptimSpec::stage1()
    };
    let mut state = OptimState::new(&[4]);
    let steps = 500;
    for t in 0..steps {
        let g: Vec<f64> = x
            .iter()
            .zip(a.iter().zip(&c))
            .map(|(x, (a, c))| 2.0 * a * (x - c))
            .collect();
        let lr = lr_at(t, steps, 25, 0.1);
        optimizer_step(&mut [&mut x], &[&g], &mut state, &spec, lr).unwrap();
    }
    assert!(f(&x) <= 0.01 * start, "{} -> {}", start, f(&x));
}

#[test]
fn training_is_deterministic() {
    let ds = data(1);
    let arch = Architecture::mlp(4, &[6]);
    let a = train_stage1(&ds, &arch, &optim(3, 7), &LossSpec::cross_entropy()).unwrap();
    let b = train_stage1(&ds, &arch, &optim(3, 7), &LossSpec::cross_entropy()).unwrap();
    assert_eq!(a, b);
    let c = train_stage1(&ds, &arch, &optim(3, 8), &LossSpec::cross_entropy()).unwrap();
    assert_ne!(a, c);
    let pa = predict(&a, ds.features()).unwrap();
    let pb = predict(&b, ds.features()).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn identity_backbone_stage2_equals_direct_head_training() {
    let ds = data(2);
    let stage1 = train_stage1(
        &ds,
        &Architecture::identity(4),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let params = BalanceParams::default();
    let counts = ds.class_counts();
    let stage2 = train_stage2(&stage1, &ds, Method::SqrtSamp, &optim(3, 5), &params).unwrap();
    let (direct, _) = train_linear_head(
        ds.features(),
        ds.labels(),
        &counts,
        0.5,
        &LossSpec::cross_entropy(),
        &optim(3, 5),
    )
    .unwrap();
    assert_eq!(stage2.heads, Heads::Single(direct));

    let cb = train_stage2(&stage1, &ds, Method::CbFocal, &optim(3, 5), &params).unwrap();
    let (direct, _) = train_linear_head(
        ds.features(),
        ds.labels(),
        &counts,
        1.0,
        &params.cb_focal_loss(),
        &optim(3, 5),
    )
    .unwrap();
    assert_eq!(cb.heads, Heads::Single(direct));
}

#[test]
fn ssb_branch_equals_sqrt_samp_head_under_shared_seed() {
    let ds = data(3);
    let stage1 = train_stage1(
        &ds,
        &Architecture::mlp(4, &[5]),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let params = BalanceParams::default();
    let sqrt = train_stage2(&stage1, &ds, Method::SqrtSamp, &optim(2, 9), &params).unwrap();
    let ssb = train_stage2(&stage1, &ds, Method::Ssb, &optim(2, 9), &params).unwrap();
    let (Heads::Single(a), Heads::Ssb { sqrt: b, .. }) = (&sqrt.heads, &ssb.heads) else {
        panic!("unexpected heads");
    };
    assert_eq!(a, b);
}

#[test]
fn bags_heads_beat_majority_within_group() {
    // four well-separated classes, all in the same count decade
    let spec = SyntheticSpec {
        num_classes: 4,
        feature_dim: 3,
        head_count: 9,
        imbalance_factor: 3.0,
        class_separation: 6.0,
        noise_sigma: 0.7,
        seed: 5,
    };
    let split = synthetic_split(&spec, &SplitSpec::default()).unwrap();
    let stage1 = train_stage1(
        &split.train,
        &Architecture::identity(3),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let stats = compute_class_stats(&split.train).unwrap();
    let layout = build_group_layout(
        &stats,
        None,
        LayoutKind::Bags {
            background_group: false,
        },
    )
    .unwrap();
    assert_eq!(layout.groups[1].len(), 4);
    let bags = bags_train_heads(&stage1, &split.train, &layout, &optim(40, 2), 8.0).unwrap();
    let head = bags.heads[1].as_ref().unwrap();

    let val = &split.val;
    let z = head.forward(val.features()).unwrap();
    let correct = (0..val.len())
        .filter(|&i| {
            let p = softmax(z.row(i)).unwrap();
            let best = (0..4).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            layout.groups[1][best] == val.labels()[i]
        })
        .count();
    let majority = val.class_counts().into_iter().max().unwrap();
    assert!(
        correct > majority,
        "{correct} correct vs majority {majority} of {}",
        val.len()
    );
}

#[test]
fn one_group_bags_is_softmax_over_real_classes() {
    let ds = data(4);
    let stats = compute_class_stats(&ds).unwrap();
    let limits = [GroupLimit {
        lower: 0,
        upper: None,
    }];
    let layout = build_group_layout_with_limits(
        &stats,
        None,
        LayoutKind::Bags {
            background_group: false,
        },
        &limits,
    )
    .unwrap();
    assert_eq!(layout.groups[1].len(), 5);
    let z = vec![0.3, -1.0, 2.0, 0.1, 0.0, 1.5];
    let p = softmax(&z).unwrap();
    let scores = bags_infer(&layout, &[None, Some(z)]).unwrap();
    assert_eq!(scores, p[..5].to_vec());
}

#[test]
fn background_group_rescales_and_scores_background() {
    let ds = data(6);
    let stats = compute_class_stats(&ds).unwrap();
    let layout = build_group_layout(
        &stats,
        Some(4),
        LayoutKind::Bags {
            background_group: true,
        },
    )
    .unwrap();
    assert_eq!(layout.groups[0], vec![4]);
    let stage1 = train_stage1(
        &ds,
        &Architecture::identity(4),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let bags = bags_train_heads(&stage1, &ds, &layout, &optim(2, 3), 8.0).unwrap();
    assert_eq!(bags.heads[0].as_ref().unwrap().out_dim, 2);
    assert!(build_group_layout(
        &stats,
        None,
        LayoutKind::Bags {
            background_group: true
        }
    )
    .is_err());
}

#[test]
fn trained_models_roundtrip_through_checkpoints() {
    let ds = data(7);
    let stage1 = train_stage1(
        &ds,
        &Architecture::mlp(4, &[6, 5]),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let params = BalanceParams::default();
    let x = ds.features();
    for method in [Method::SqrtSamp, Method::CbFocal, Method::Bags, Method::Ssb] {
        let m = train_stage2(&stage1, &ds, method, &optim(2, 2), &params).unwrap();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m, "{method}");
        let (a, b) = (predict(&m, x).unwrap(), predict(&back, x).unwrap());
        let bits = |s: &Matrix| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.scores), bits(&b.scores));
    }
}

#[test]
fn stage2_leaves_backbone_untouched() {
    let ds = data(8);
    let stage1 = train_stage1(
        &ds,
        &Architecture::mlp(4, &[7]),
        &optim(2, 1),
        &LossSpec::cross_entropy(),
    )
    .unwrap();
    let before = stage1.backbone.clone();
    for method in [Method::SqrtSamp, Method::CbFocal, Method::Bags, Method::Ssb] {
        let m = train_stage2(
            &stage1,
            &ds,
            method,
            &optim(2, 4),
            &BalanceParams::default(),
        )
        .unwrap();
        assert_eq!(m.backbone.layers, before.layers);
    }
    assert_eq!(stage1.backbone, before);
}

use pkcam_core::attention::AttentionKind;
use pkcam_core::backbone::{build_backbone, AttentionConfig, BackboneSpec, Integration, Stem};
use pkcam_core::complexity::{count_flops, count_params, Convention};
use pkcam_core::pkcam::{Fusion, Interaction, PkcamConfig};

const MI: f64 = (1u64 << 20) as f64;
const GI: f64 = (1u64 << 30) as f64;
const IMAGENET: [usize; 4] = [1, 3, 224, 224];

fn cost(depth: usize, attention: AttentionConfig, policy: Integration) -> (f64, f64) {
    let g = build_backbone(
        BackboneSpec::resnet(depth, 1000).unwrap(),
        attention,
        policy,
    )
    .unwrap();
    let p = count_params(&g).total_params() as f64;
    let f = count_flops(&g, IMAGENET, Convention::Mac1)
        .unwrap()
        .total_flops() as f64;
    (p, f)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

/// Published (params M, GFLOPs) for plain, ECA and PKCAM networks at
/// 224×224; ECA and PKCAM share the plain numbers at the published precision.
const PUBLISHED: [(usize, f64, f64); 3] =
    [(18, 11.14, 1.699), (34, 20.78, 3.427), (50, 24.37, 3.86)];

#[test]
fn vanilla_resnets_match_published_costs_under_binary_prefixes() {
    for (depth, pm, gf) in PUBLISHED {
        let (p, f) = cost(depth, AttentionConfig::None, Integration::AllBlocks);
        assert!(rel(p / MI, pm) < 0.001, "R{depth}: {} vs {pm}", p / MI);
        assert!(rel(f / GI, gf) < 0.005, "R{depth}: {} vs {gf}", f / GI);
    }
}

#[test]
fn published_costs_are_within_tolerance_under_decimal_prefixes() {
    for (depth, pm, gf) in PUBLISHED {
        let (p, f) = cost(depth, AttentionConfig::None, Integration::AllBlocks);
        assert!(rel(p / 1e6, pm) < 0.05, "R{depth}");
        assert!(rel(f / 1e9, gf) < 0.10, "R{depth}");
    }
}

#[test]
fn exact_resnet_counts() {
    assert_eq!(
        cost(18, AttentionConfig::None, Integration::AllBlocks).0 as u64,
        11_689_512
    );
    assert_eq!(
        cost(34, AttentionConfig::None, Integration::AllBlocks).0 as u64,
        21_797_672
    );
    assert_eq!(
        cost(50, AttentionConfig::None, Integration::AllBlocks).0 as u64,
        25_557_032
    );
    assert_eq!(
        cost(18, AttentionConfig::None, Integration::AllBlocks).1 as u64,
        1_823_933_928
    );
}

#[test]
fn pkcam_and_eca_keep_plain_costs_at_published_precision() {
    for (depth, pm, gf) in PUBLISHED {
        for (attention, policy) in [
            (
                AttentionConfig::Pkcam(PkcamConfig::default()),
                Integration::LastBlockPerStage,
            ),
            (
                AttentionConfig::Pkcam(PkcamConfig::default()),
                Integration::AllBlocks,
            ),
            (
                AttentionConfig::Local(AttentionKind::eca_adaptive()),
                Integration::AllBlocks,
            ),
        ] {
            let (p, f) = cost(depth, attention, policy);
            assert!(rel(p / MI, pm) < 0.001, "R{depth} {attention:?}");
            assert!(rel(f / GI, gf) < 0.005, "R{depth} {attention:?}");
        }
    }
}

#[test]
fn se_resnets_match_published_params() {
    let se = AttentionConfig::Local(AttentionKind::Se { reduction: 16 });
    for (depth, pm) in [(18, 11.23), (34, 20.93), (50, 26.77)] {
        let (p, _) = cost(depth, se, Integration::AllBlocks);
        assert!(rel(p / MI, pm) < 0.001, "SE-R{depth}: {}", p / MI);
    }
}

fn small_image_net(depth: usize, interaction: Interaction, fusion: Fusion) -> (f64, f64) {
    let spec = BackboneSpec::resnet(depth, 200)
        .unwrap()
        .with_stem(Stem::Compact);
    let cfg = PkcamConfig {
        interaction,
        fusion,
        ..PkcamConfig::default()
    };
    let g = build_backbone(
        spec,
        AttentionConfig::Pkcam(cfg),
        Integration::LastBlockPerStage,
    )
    .unwrap();
    let p = count_params(&g).total_params() as f64;
    let f = count_flops(&g, [1, 3, 64, 64], Convention::Mac1)
        .unwrap()
        .total_flops() as f64;
    (p / MI, f / GI)
}

#[test]
fn resnet18_small_image_variants_match_published_costs() {
    let published = [
        (Interaction::Conv1dOverR, Fusion::Conv1dK2, 10.749),
        (Interaction::Sum, Fusion::Conv1dK2, 10.749),
        (Interaction::FullFc, Fusion::Conv1dK2, 11.413),
        (Interaction::Conv1dOverR, Fusion::Sum, 10.749),
        (Interaction::FullFc, Fusion::Sum, 11.413),
        (Interaction::Conv1dOverR, Fusion::FullFc, 11.413),
        (Interaction::Sum, Fusion::FullFc, 11.413),
        (Interaction::FullFc, Fusion::FullFc, 12.077),
    ];
    for (interaction, fusion, pm) in published {
        let (p, f) = small_image_net(18, interaction, fusion);
        assert!(
            (p - pm).abs() < 0.0015,
            "{interaction}/{fusion}: {p} vs {pm}"
        );
        // Norm and activation terms are counted here, hence the looser bound.
        assert!(rel(f, 2.075) < 0.005, "{interaction}/{fusion}: {f}");
    }
}

#[test]
fn interaction_and_fusion_ordering_holds_for_all_depths() {
    let inter = [
        Interaction::Sum,
        Interaction::Conv1dOverR,
        Interaction::FullFc,
    ];
    let fus = [Fusion::Sum, Fusion::Conv1dK2, Fusion::FullFc];
    for depth in [18, 34, 50] {
        for f in fus {
            let p: Vec<f64> = inter
                .iter()
                .map(|&i| small_image_net(depth, i, f).0)
                .collect();
            assert!(p[0] < p[1] && p[1] < p[2], "R{depth}/{f}: {p:?}");
        }
        for i in inter {
            let p: Vec<f64> = fus
                .iter()
                .map(|&f| small_image_net(depth, i, f).0)
                .collect();
            assert!(p[0] < p[1] && p[1] < p[2], "R{depth}/{i}: {p:?}");
        }
    }
}

#[test]
fn flops_scale_with_batch_and_double_under_mac2_for_convs() {
    let g = build_backbone(
        BackboneSpec::resnet(18, 1000).unwrap(),
        AttentionConfig::Pkcam(PkcamConfig::default()),
        Integration::LastBlockPerStage,
    )
    .unwrap();
    let one = count_flops(&g, IMAGENET, Convention::Mac1).unwrap();
    let four = count_flops(&g, [4, 3, 224, 224], Convention::Mac1).unwrap();
    assert_eq!(four.total_flops(), 4 * one.total_flops());
    let two = count_flops(&g, IMAGENET, Convention::Mac2).unwrap();
    for (a, b) in one.rows.iter().zip(&two.rows) {
        if a.layer.ends_with("conv") || a.layer.ends_with("conv1") {
            assert_eq!(b.flops, 2 * a.flops, "{}", a.layer);
        }
    }
    // Bias adds are not multiply-accumulates.
    let head = two.rows.iter().find(|r| r.layer == "head.fc").unwrap();
    assert_eq!(head.flops, 2 * 512 * 1000 + 1000);
    assert!(two.total_flops() < 2 * one.total_flops());
}

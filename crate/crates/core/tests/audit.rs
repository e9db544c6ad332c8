use recdet::audit::{count_params, estimate_flops, Group, RunManifest};
use recdet::decoder::{DecoderConfig, Sharing};
use recdet::numerics::Params;
use recdet::pipeline::{Detector, TrainConfig};
use recdet::posenc::CenternessVariant;

fn instantiate(cfg: &DecoderConfig) -> (Detector, Params<f32>) {
    Detector::build::<f32>(cfg, 3).unwrap()
}

#[test]
fn closed_form_matches_every_instantiated_combination() {
    let mut checked = 0;
    for sharing in Sharing::ALL {
        for depth in [1, 2] {
            for use_box_pe in [false, true] {
                for centerness in [None, Some(CenternessVariant::Static), Some(CenternessVariant::Learnable), Some(CenternessVariant::Adjust)] {
                    let cfg = DecoderConfig {
                        sharing,
                        in_stage_depth: depth,
                        use_box_pe,
                        use_centerness: centerness.is_some(),
                        centerness_variant: centerness.unwrap_or(CenternessVariant::Static),
                        ..DecoderConfig::desk()
                    };
                    let (model, params) = instantiate(&cfg);
                    let audit = count_params(&cfg);
                    audit.verify(&params).unwrap_or_else(|e| panic!("{cfg:?}: {e}"));
                    let stage_sum: usize = model.decoder.stages.iter().map(|s| s.num_params()).sum();
                    assert_eq!(audit.decoder_total, stage_sum as u64);
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 48);
}

#[test]
fn verify_rejects_a_wrong_policy() {
    let cfg = DecoderConfig::desk();
    let (_, params) = instantiate(&cfg);
    let shared = count_params(&DecoderConfig {
        sharing: Sharing::SharedAll,
        ..cfg.clone()
    });
    assert!(shared.verify(&params).is_err());
    let with_pe = count_params(&DecoderConfig { use_box_pe: true, ..cfg });
    assert!(with_pe.verify(&params).is_err());
}

#[test]
fn paper_scale_shared_model_matches_closed_form() {
    let cfg = DecoderConfig {
        sharing: Sharing::SharedAll,
        ..DecoderConfig::paper_scale()
    };
    let (_, params) = instantiate(&cfg);
    let audit = count_params(&cfg);
    audit.verify(&params).unwrap();
    assert_eq!(audit.group(Group::Dyn), 8_421_376);
    assert_eq!(audit.group(Group::Out), 3_211_520);
}

#[test]
fn sharing_ratios_are_exact() {
    let at = |sharing| {
        count_params(&DecoderConfig {
            sharing,
            ..DecoderConfig::paper_scale()
        })
        .decoder_total
    };
    let cascade = at(Sharing::Cascade);
    assert_eq!(cascade % 6, 0);
    assert_eq!(at(Sharing::SharedAll) * 6, cascade);
    assert_eq!(at(Sharing::FirstIndependent) * 3, cascade);
    // Sharing all stages saves five of six stage copies, about 66M.
    let saved = (cascade - at(Sharing::SharedAll)) as f64 / 1e6;
    assert!((saved - 66.0).abs() < 0.5 + 5.0 * 0.05, "saved {saved}M");
}

#[test]
fn in_stage_depth_changes_flops_not_parameters() {
    for base in [DecoderConfig::desk(), DecoderConfig::paper_scale()] {
        let one = DecoderConfig { in_stage_depth: 1, ..base.clone() };
        let two = DecoderConfig { in_stage_depth: 2, ..base };
        assert_eq!(count_params(&one).to_csv(), count_params(&two).to_csv());
        assert_eq!(count_params(&one), count_params(&two));
        let f1 = estimate_flops(&one, one.num_proposals, 128, 0);
        let f2 = estimate_flops(&two, two.num_proposals, 128, 0);
        assert!(f2.decoder_total > f1.decoder_total);
        assert!(f2.per_stage.dyn_layer > f1.per_stage.dyn_layer);
        assert_eq!(f2.per_stage.self_attention, f1.per_stage.self_attention);
    }
}

#[test]
fn audit_csv_is_stable() {
    let cfg = DecoderConfig::paper_scale().with_full_recursion();
    assert_eq!(count_params(&cfg).to_csv(), count_params(&cfg.clone()).to_csv());
    assert_eq!(count_params(&cfg).to_table(), count_params(&cfg).to_table());
}

#[test]
fn manifest_records_config_and_parameters() {
    let cfg = TrainConfig::desk();
    let (_, params) = instantiate(&cfg.decoder);
    let m = RunManifest::new(&cfg, cfg.seed, &params).unwrap();
    let back = RunManifest::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
    let restored: TrainConfig = serde_json::from_value(back.config).unwrap();
    assert_eq!(restored, cfg);
}

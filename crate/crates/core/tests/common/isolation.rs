//! Which parameter groups each update line may and may not touch.

use uda_core::config::TrainConfig;
use uda_core::nn::Group;
use uda_core::trainer::Line;

/// Groups a line's loss leaves exactly untouched even before routing.
pub fn untouched(line: Line) -> &'static [Group] {
    match line {
        Line::Segmentation => &[Group::Discriminator, Group::Critic],
        Line::Alignment => &[Group::Classifier, Group::Quantizer, Group::Critic],
        Line::Quantizer => &[Group::Discriminator, Group::Critic],
        Line::Critic => &[
            Group::Encoder,
            Group::Classifier,
            Group::Discriminator,
            Group::Quantizer,
        ],
    }
}

/// Every way the step for `cfg` breaks line isolation: routed passes must
/// reach all declared groups and nothing else; unrouted passes must leave
/// [`untouched`] groups at exactly zero.
pub fn violations(cfg: TrainConfig) -> Vec<String> {
    let micro = super::Micro::new(cfg);
    let mut sg = micro.step();
    let mut out = Vec::new();
    for line in Line::ALL {
        let loss = sg.line_loss(line).unwrap().expect("every line active");
        let mut routed = micro.model.store.clone();
        routed.zero_grad();
        sg.accumulate(loss, &mut routed, Some(line.groups()))
            .unwrap();
        let mut native = micro.model.store.clone();
        native.zero_grad();
        sg.accumulate(loss, &mut native, None).unwrap();
        for g in Group::ALL {
            let declared = line.groups().contains(&g);
            if declared && routed.grads_all_zero(g) {
                out.push(format!("{line:?} leaves {g:?} untouched"));
            }
            if !declared && !routed.grads_all_zero(g) {
                out.push(format!("{line:?} leaks into {g:?}"));
            }
            if native.grads_all_zero(g) != untouched(line).contains(&g) {
                out.push(format!(
                    "{line:?} unrouted: {g:?} zero = {}",
                    native.grads_all_zero(g)
                ));
            }
        }
    }
    out
}

/// With no adversarial or divergence weight the fused pass must leave the
/// discriminator at exactly zero.
pub fn zero_weight_violation(seed: u64) -> Option<String> {
    let cfg = TrainConfig {
        xi2: 0.0,
        xi3: 0.0,
        ..super::micro_config(seed)
    };
    let micro = super::Micro::new(cfg);
    let sg = micro.step();
    let mut store = micro.model.store.clone();
    store.zero_grad();
    sg.accumulate_fused(&mut store).unwrap();
    (!store.grads_all_zero(Group::Discriminator))
        .then(|| "discriminator gradient with ξ2 = ξ3 = 0".to_string())
}

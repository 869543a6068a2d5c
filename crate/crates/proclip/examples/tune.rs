//! Scratch driver for profile tuning. Not part of the deliverable.

use proclip::curriculum::{
    evaluate_model, run_baseline, run_stage1, run_stage2, TrainConfig, TrainingSetup,
};

fn main() {
    for hidden in [12usize, 16, 24] {
        for s2_lr in [1e-4, 3e-4] {
            let mut base = TrainConfig::desk();
            base.stage1.epochs = 160;
            base.stage1.lr = 6e-3;
            base.stage2.lr = s2_lr;
            base.world.hidden_dim = hidden;
            base.world.eval_per_class = 16;
            let setup = match TrainingSetup::build(&base) {
                Ok(s) => s,
                Err(e) => {
                    println!("hidden={hidden}: setup FAILED {e}");
                    continue;
                }
            };
            let stage1 = run_stage1(&base, &setup).unwrap();
            let ratio =
                stage1.epoch_mean_loss.last().unwrap() / stage1.epoch_mean_loss.first().unwrap();
            let s1 = evaluate_model(
                &setup,
                &setup.teachers.image_encoder,
                &stage1.projector,
                "s1",
            )
            .unwrap();
            println!(
                "hidden={hidden} s2lr={s2_lr}: pretrain=({:.3},{:.3}) s1 ratio={ratio:.4} r@1=({:.3},{:.3}) held={:.3}",
                setup.teachers.pretrain_recall.0,
                setup.teachers.pretrain_recall.1,
                s1.recall_i2t_at1,
                s1.recall_t2i_at1,
                s1.heldout_zero_shot_accuracy
            );

            for epochs in [20usize, 40] {
                let mut line = format!("  s2 epochs={epochs}:");
                for lambda in [0.0, 0.003, 0.01, 0.03] {
                    let mut cfg = base.clone();
                    cfg.stage2.epochs = epochs;
                    cfg.stage2.lambda = lambda;
                    let out = run_stage2(&cfg, &setup, &stage1.projector).unwrap();
                    let r =
                        evaluate_model(&setup, &out.image_encoder, &out.projector, "s2").unwrap();
                    line.push_str(&format!(
                        " | l={lambda}: held={:.3} r@1=({:.3},{:.3}) drift={:.2}",
                        r.heldout_zero_shot_accuracy,
                        r.recall_i2t_at1,
                        r.recall_t2i_at1,
                        r.mean_drift
                    ));
                }
                let mut cfg = base.clone();
                cfg.stage2.epochs = epochs;
                let out = run_baseline(&cfg, &setup).unwrap();
                let r = evaluate_model(&setup, &out.image_encoder, &out.projector, "bl").unwrap();
                line.push_str(&format!(
                    " | BL: held={:.3} r@1=({:.3},{:.3}) drift={:.2}",
                    r.heldout_zero_shot_accuracy, r.recall_i2t_at1, r.recall_t2i_at1, r.mean_drift
                ));
                println!("{line}");
            }
        }
    }
}

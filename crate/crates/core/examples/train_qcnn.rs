//! Trains a one-layer QCNN on clean QPR data and reports accuracies and
//! margin statistics.
use qmargin::analyze::{QprDataConfig, QprExperiment};
use qmargin::ansatz::AnsatzSpec;
use qmargin::train::TrainConfig;

fn main() -> qmargin::Result<()> {
    let exp = QprExperiment::new(QprDataConfig {
        pool_per_class: 25,
        test_size: 200,
        ..QprDataConfig::default()
    })?;
    let spec = AnsatzSpec::qcnn(8, 1, 4, false)?;
    let train = TrainConfig {
        learning_rate: 0.01,
        max_iters: 300,
        ..TrainConfig::default()
    };
    let run = exp.run(&spec, 0.0, 0, &train)?;
    let r = &run.record;
    println!("params={} stopped_at={}", r.theta_final.len(), r.stopped_at);
    println!("loss {:.4} -> {:.4}", r.loss_history[0], r.loss_history.last().unwrap());
    println!("train_acc={:.3} test_acc={:.3}", r.train_accuracy, r.test_accuracy.unwrap());
    println!("margins q1={:.3} median={:.3} mean={:.3}", run.margins.q1, run.margins.median, run.margins.mean);
    Ok(())
}

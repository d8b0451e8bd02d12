use eager::gridworld::{Layout, TaskKind, TaskSpec};
use eager::rl::{sequence_batch, Collector, Policy, PolicyConfig, PpoConfig};
use eager_nn::gradcheck;

#[test]
fn ppo_loss_gradient_matches_finite_differences() {
    let spec = TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap();
    let policy = Policy::new(PolicyConfig::tiny(), 8).unwrap();
    let cfg = PpoConfig { batch: 24, minibatch: 24, envs: 3, recurrence: 4, ..PpoConfig::default() };
    let mut col = Collector::new(&spec, None, 3, policy.cfg.hidden, 2).unwrap();
    let mut ro = col.collect(&policy, 8, &cfg).unwrap();
    // Move the old policy away from the current one so ratios sit off the clip kinks.
    for (i, lp) in ro.logp.iter_mut().enumerate() {
        *lp += 0.3 * ((i as f64) * 1.7).sin();
    }
    let starts = [(0, 0), (0, 1), (4, 2), (4, 0)];
    let b = sequence_batch(&ro, &starts, 4, policy.cfg.hidden);
    let mut p64 = policy.cast_f64();
    // Zero-initialised biases put ReLU inputs exactly on the kink.
    let ids: Vec<_> = p64.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in p64.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((k * 31 + j) as f64 * 0.77).sin();
        }
    }
    assert!(p64.params.num_scalars() <= 1000, "{} parameters", p64.params.num_scalars());
    let p64 = p64;
    let report = gradcheck::check(&p64.params, 1e-5, 1e-6, |tape| p64.ppo_loss(tape, &b, &cfg).unwrap().loss);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

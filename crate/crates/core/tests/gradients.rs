mod common;

use causalfsfg::model::Model;
use common::{check_model_gradients, tiny_batch, tiny_config};

#[test]
fn every_parameter_group_matches_finite_differences() {
    let model = Model::new(&tiny_config(), 11).unwrap();
    let t = std::time::Instant::now();
    for c in check_model_gradients(&model, &tiny_batch(5), 1e-6, None) {
        eprintln!("{:<18} arrays {:>3} scalars {:>5} rel {:.2e} |g| {:.3e}", c.group, c.arrays, c.scalars, c.rel_error, c.analytic_norm);
        assert!(c.arrays > 0);
        assert!(c.rel_error < 1e-4, "{}: {:e}", c.group, c.rel_error);
    }
    eprintln!("{:?}", t.elapsed());
}

use flowmap_core::schedule::Schedule;
use flowmap_wasm::{anchors, error_study, teacher_cost, trajectory_table};

#[test]
fn trajectory_rows_run_from_t_max_down() {
    let rows = trajectory_table(1.5, "heun", 16, 5).unwrap();
    assert_eq!(rows.len(), 17 * 6);
    assert_eq!(rows[0], 10.0);
    assert!((rows[16 * 6] - 0.002).abs() < 1e-12);
    let edm = Schedule::edm();
    assert_eq!(&rows[1..6], anchors(&edm, 5).as_slice());
    // symmetric mixture, symmetric anchors: trajectories mirror each other
    let last = &rows[16 * 6 + 1..];
    assert!((last[0] + last[4]).abs() < 1e-9 && last[2].abs() < 1e-12);
}

#[test]
fn error_study_decreases_with_steps() {
    let report = error_study(1.5, &[8, 16, 32]).unwrap();
    for name in ["euler", "heun", "multistep"] {
        let rows = report[name].as_array().unwrap();
        let errs: Vec<f64> = rows.iter().map(|r| r[1].as_f64().unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{name}: {errs:?}");
    }
}

#[test]
fn teacher_cost_is_exact() {
    assert_eq!(teacher_cost(16, 2, 2).unwrap(), "17/16");
    assert_eq!(teacher_cost(16, 3, 2).unwrap(), "9/8");
    assert_eq!(teacher_cost(16, 3, 1).unwrap(), "1");
}

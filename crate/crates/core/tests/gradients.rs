mod grad_suite;

fn run(group: fn() -> grad_suite::Outcome) {
    let n = group().unwrap_or_else(|e| panic!("{e}"));
    assert!(n > 0);
}

#[test]
fn layer_blocks() {
    run(grad_suite::layer_blocks);
}

#[test]
fn idn_stages() {
    run(grad_suite::idn_stages);
}

#[test]
fn tfga_sub_blocks() {
    run(grad_suite::tfga_sub_blocks);
}

#[test]
fn igm_sub_blocks() {
    run(grad_suite::igm_sub_blocks);
}

#[test]
fn losses() {
    run(grad_suite::losses);
}

#[test]
fn toy_task_heads() {
    run(grad_suite::toy_task_heads);
}

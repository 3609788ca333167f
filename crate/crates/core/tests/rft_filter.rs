mod support;

#[test]
fn retained_pairs_pass_a_post_hoc_audit_and_nest_across_thresholds() {
    let fx = support::rft_fixture(&support::quick_config(2));
    let [lo, mid, hi] = support::score_quartiles(&fx);
    let v = support::rft_filter_check(&fx, &[lo - 1.0, lo, mid, hi, hi + 1.0]);
    assert!(v.pass, "{}", v.detail);
    let v = support::rft_filter_check(&fx, &[-1.0, 0.0, 1.0]);
    assert!(v.pass, "{}", v.detail);
}

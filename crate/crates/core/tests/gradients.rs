mod common;

use pinnopf::pinn::Variant;

#[test]
fn analytic_gradients_match_central_differences_for_every_variant() {
    for v in Variant::ALL {
        let r = common::gradient_check(v, 3, 50, 17);
        assert!(r.checked >= 150, "{v}: only {} smooth coordinates", r.checked);
        assert_eq!(r.failures, 0, "{v}: {r:?}");
    }
}

mod common;

use common::{grad_check, grad_fixture, loss, Term, GRAD_TOL};
use molmark::runtime::Graph;
use molmark::training::{schedule, ScheduleParams};

#[test]
fn encoder_loss_gradient() {
    let r = grad_check(Term::Encoder, |n| n.starts_with("encoder"));
    assert!(r.checked > 50);
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

#[test]
fn decoder_loss_gradient_through_mds() {
    let r = grad_check(Term::Decoder, |_| true);
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

#[test]
fn weighted_composite_gradient() {
    let (le, ld) = schedule(0, 0.0, &ScheduleParams::default());
    let r = grad_check(Term::Weighted(le, ld), |_| true);
    assert!(r.checked > 100);
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

#[test]
fn encoder_loss_leaves_decoder_untouched() {
    let f = grad_fixture();
    let mut g = Graph::new(&f.params);
    let l = loss(&mut g, &f, Term::Encoder).unwrap();
    let grads = g.backward(l).unwrap();
    for id in 0..f.params.len() {
        if f.params.name(id).starts_with("decoder") {
            assert!(grads.get(id).is_none(), "{}", f.params.name(id));
        }
    }
}

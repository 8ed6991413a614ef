use flowmap_core::numcore::Array;
use flowmap_core::schedule::{denoiser_to_velocity, perturb, velocity_to_denoiser, Schedule};
use proptest::prelude::*;

fn schedule(edm: bool) -> Schedule {
    if edm {
        Schedule::edm()
    } else {
        Schedule::fm()
    }
}

proptest! {
    #[test]
    fn velocity_round_trip(edm in any::<bool>(), t in 0.01f64..0.99, x in -5.0f64..5.0, vel in -5.0f64..5.0) {
        let s = schedule(edm);
        let t = if edm { s.t_min + t * (s.t_max - s.t_min) } else { t };
        let (x, vel) = (Array::vector(vec![x]), Array::vector(vec![vel]));
        let d = velocity_to_denoiser(&s, &vel, &x, t).unwrap();
        let back = denoiser_to_velocity(&s, &d, &x, t).unwrap();
        prop_assert!((back.data()[0] - vel.data()[0]).abs() <= 1e-12 * (1.0 + vel.data()[0].abs()) * (1.0 + x.data()[0].abs()));
    }

    #[test]
    fn perturb_is_affine(edm in any::<bool>(), t in 0.0f64..1.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let s = schedule(edm);
        let t = s.t_min + t * (s.t_max - s.t_min);
        let out = perturb(&s, &Array::vector(vec![a]), &Array::vector(vec![b]), t).unwrap();
        prop_assert_eq!(out.data()[0], s.alpha(t) * a + s.sigma(t) * b);
    }
}

use uasnet_core::data::phantom::{generate_phantom, PhantomSpec};
use uasnet_core::mask::{intersection, lc_region, union};
use uasnet_core::metrics::kde_from_values;

fn main() {
    for (name, spec) in [
        ("default/64", PhantomSpec::default()),
        ("default/32", PhantomSpec::for_patch(32)),
        ("lc_heavy/64", PhantomSpec::lc_heavy(64)),
    ] {
        let (mut hc, mut lc) = (Vec::new(), Vec::new());
        let (mut inter_area, mut lc_area, mut union_area) = (0usize, 0usize, 0usize);
        for seed in 0..300u64 {
            let set = generate_phantom(&spec, 70_000 + seed).unwrap();
            let i = intersection(&set.masks).unwrap();
            let d = lc_region(&set.masks).unwrap();
            let u = union(&set.masks).unwrap();
            inter_area += i.area();
            lc_area += d.area();
            union_area += u.area();
            for ((&hu, &iv), &dv) in set.image.iter().zip(i.data().iter()).zip(d.data().iter()) {
                if iv == 1 { hc.push(hu as f64); }
                if dv == 1 { lc.push(hu as f64); }
            }
        }
        let hm = kde_from_values(&hc, None).unwrap().mode();
        let lm = kde_from_values(&lc, None).unwrap().mode();
        println!("{name}: HC mode {hm:+.0} LC mode {lm:+.0} | areas inter {} lc {} union {}",
            inter_area / 300, lc_area / 300, union_area / 300);
    }
}

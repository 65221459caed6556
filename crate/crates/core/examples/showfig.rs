//! Dumps a few generated samples as ASCII grayscale for eyeballing.
use posebench_core::synthpose::{Dataset, SkeletonSpec};

fn main() {
    let spec = SkeletonSpec::five_joint();
    let ds = Dataset::generate(&spec, 3, 7, 0.3);
    for s in &ds.samples {
        println!("id={} h={:.1} scale={:.1} vis={:?}", s.id, s.head_size, s.scale, s.visibility);
        let ramp = b" .:-=+*#%@";
        for y in 0..32 {
            let row: String = (0..32)
                .map(|x| {
                    let v = s.image.data()[y * 32 + x];
                    ramp[((v / 256.0 * 10.0) as usize).min(9)] as char
                })
                .collect();
            println!("{row}");
        }
        println!("joints: {:?}", s.joints.iter().map(|&(x,y)| (x.round(), y.round())).collect::<Vec<_>>());
    }
}

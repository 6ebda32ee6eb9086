//! Soft assignments against a codebook as the temperature drops, compared
//! with nearest-code quantization.

use vecformer::quantizer::{softvq, usage_entropy, vanilla_vq, Codebook, CodebookRole, SoftVqConfig};
use vecformer::SeededRng;

fn main() -> vecformer::Result<()> {
    let mut rng = SeededRng::new(3);
    let book = Codebook::init(8, 4, CodebookRole::Feature, &mut rng)?;
    let h = rng.normal_tensor(200, 4, 1.0);
    let (_, hard) = vanilla_vq(&h, &book)?;

    for t in [4.0, 1.0, 0.25, 0.01] {
        let (tokens, weights) = softvq(&h, &book, &SoftVqConfig { temperature: t })?;
        let peak: f64 = (0..weights.rows())
            .map(|i| weights.row(i).iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / weights.rows() as f64;
        let err: f64 = tokens.data().iter().zip(h.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("T={t:<5} mean max weight {peak:.3} usage entropy {:.3} ‖tokens − h‖ {err:.3}", usage_entropy(&weights));
    }
    let mut counts = vec![0usize; book.size()];
    for &c in &hard {
        counts[c] += 1;
    }
    println!("nearest-code counts {counts:?}");
    Ok(())
}

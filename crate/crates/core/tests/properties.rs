use gradmix::autodiff::Graph;
use gradmix::losses::{simclr_loss, supcon_loss, ContrastiveBatch, Denominator};
use gradmix::metrics::{auroc, ScoredSample};
use gradmix::Tensor;
use proptest::prelude::*;

fn losses(z: &[Vec<f64>], labels: &[usize]) -> [f64; 3] {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![z.len(), z[0].len()], z.concat()).unwrap());
    let x = g.l2_normalize(x).unwrap();
    let b = ContrastiveBatch::new(x, Some(labels), 0.3);
    let nodes = [
        simclr_loss(&mut g, &b).unwrap(),
        supcon_loss(&mut g, &b, Denominator::AsPrinted).unwrap(),
        supcon_loss(&mut g, &b, Denominator::Standard).unwrap(),
    ];
    nodes.map(|n| g.value(n).item())
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2 * n),
            prop::collection::vec(0usize..3, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    /// Reordering samples, keeping each pair of views together, leaves every loss unchanged.
    #[test]
    fn contrastive_losses_ignore_sample_order((z, base, perm) in batch()) {
        let n = base.len();
        let labels: Vec<usize> = base.iter().chain(&base).copied().collect();
        let order: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|p| p + n)).collect();
        let zp: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
        let lp: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        for (a, b) in losses(&z, &labels).iter().zip(losses(&zp, &lp)) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn auroc_flips_with_the_score(scores in prop::collection::vec((0i32..20, any::<bool>()), 2..60)) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let up: Vec<_> = scores.iter().map(|&(s, p)| ScoredSample::new(f64::from(s), p)).collect();
        let down: Vec<_> = scores.iter().map(|&(s, p)| ScoredSample::new(-f64::from(s), p)).collect();
        let (a, b) = (auroc(&up).unwrap(), auroc(&down).unwrap());
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }
}

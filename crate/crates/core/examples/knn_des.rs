//! Correlation k-NN graph over module signals, hop-distance labels around a
//! target node, then DES and AUC of a trained classifier.

use vecformer::encoder::GraphContext;
use vecformer::evalbench::metrics::positive_scores;
use vecformer::evalbench::{des_score, roc_auc, SplitTag, DES_THRESHOLD};
use vecformer::graphio::{build_knn_correlation_graph, gen_de_labels, gen_module_signals};
use vecformer::trainer::{default_split, predict, train_stage1, train_stage2, TrainConfig};
use vecformer::{GraphDataset, Labels, SeededRng};

fn main() -> vecformer::Result<()> {
    let mut rng = SeededRng::new(2);
    let (signals, _) = gen_module_signals(240, 30, 4, 0.5, &mut rng);
    let adj = build_knn_correlation_graph(&signals, 8)?;
    let labels = gen_de_labels(&adj, 0, Some(2))?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    println!("{} nodes, {} edges, {positives} within two hops of node 0", adj.n(), adj.num_edges());
    let ds = GraphDataset::new(adj, signals, Labels::Classes(labels.into_iter().map(usize::from).collect()), 2)?;

    let cfg = TrainConfig {
        hidden_dim: 32,
        m: 16,
        n: 16,
        n_f: 4,
        n_s: 4,
        stage1_epochs: 30,
        stage2_epochs: 100,
        patience: 30,
        ..TrainConfig::default()
    };
    let s1 = train_stage1(&ds, &cfg)?;
    let split = default_split(&ds, &cfg)?;
    let s2 = train_stage2(&ds, &split, &s1.checkpoint, &cfg)?;
    let logits = predict(&s2.model, &s2.fit.store, &GraphContext::new(&ds.adjacency), &ds)?;
    let scores = positive_scores(&logits, &ds.labels, 1)?;

    let truth: Vec<bool> = ds.labels.binary_column(1);
    let auc = roc_auc(&scores, &truth, &split.test, SplitTag::Test)?;
    let probs: Vec<f64> = split.test.iter().map(|&i| scores[i]).collect();
    let true_set: Vec<usize> = (0..split.test.len()).filter(|&k| truth[split.test[k]]).collect();
    let des = des_score(&probs, &true_set, None, DES_THRESHOLD)?;
    println!("test auc {:.3} des {:.3}", auc.value, des.value);
    Ok(())
}

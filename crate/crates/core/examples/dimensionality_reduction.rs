//! Online nonlinear dimensionality reduction of clustered data, compared with
//! PCA by the leave-one-out 1-NN error of the embeddings.

use iegp::kernels::rbf_dictionary;
use iegp::lvm::{lvm_init, pca_embed, LvmOptions};
use iegp::metrics::lvm_knn_error;
use iegp::streams::{gen_stream, StreamKind, StreamSpec};

fn main() -> iegp::Result<()> {
    let (len, t0) = (600, 60);
    let kind = StreamKind::LatentClusters { clusters: 3, latent_dim: 2, output_dim: 10 };
    let stream = gen_stream(&StreamSpec { kind, len, noise: 0.01, seed: 8 })?;
    let y = stream.observation_matrix();

    let dict = rbf_dictionary(-1..=1, 1.0, 0.1, 2)?;
    let mut model = lvm_init(&y.rows(0, t0).into_owned(), &dict, 30, 8, LvmOptions::default())?;
    let mut counts = vec![0usize; dict.len()];
    for row in &stream.observations[t0..] {
        counts[model.embed_step(row)?.m_star] += 1;
    }
    println!("selected expert counts {counts:?}, final weights {:.3?}", model.weights());

    let mut centered = y.clone();
    let mean = y.row_mean();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    println!("1-NN error  GP-LVM ensemble {:.4}", lvm_knn_error(&model.embedding_matrix(), &stream.labels)?);
    println!("1-NN error  PCA             {:.4}", lvm_knn_error(&pca_embed(&centered, 2)?, &stream.labels)?);
    Ok(())
}

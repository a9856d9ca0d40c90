//! Intrinsic, extrinsic and qualitative evaluation of vector spaces.

pub mod classification;
pub mod clusters;
pub mod similarity;
pub mod tsne;

pub use classification::{
    classification_metrics, embed_text, eval_classifier, evaluate_over_seeds, split_dataset, train_proxy_classifier,
    ClassificationReport, ClassifierConfig, Label, LabeledDataset, LinearClassifier, MultiSeedReport, Record, Split,
    Text,
};
pub use clusters::{cluster_report, ClusterReport, SeedCluster};
pub use similarity::{eval_word_similarity, spearman, SimilarityBenchmark, SimilarityReport};
pub use tsne::{project_2d, TsneConfig, TsneResult};

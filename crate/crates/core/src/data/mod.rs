//! Procedural toy scenes with correlated dense targets, their file
//! format, and the Gaussian gradient sandbox.

mod dataset;
mod sandbox;
mod scene;

pub use dataset::{
    generate_dataset, generate_split_dataset, generate_train_test, read_dataset, scene_seed, toy_task_spec,
    write_dataset, Dataset, Split, DATASET_MAGIC, DATASET_VERSION, TOY_TASKS,
};
pub(crate) use dataset::splitmix64;
pub use sandbox::{sample_task_gradients, GradientSandbox, GradientSandboxSpec};
pub use scene::{
    generate_scene, render_scene, sample_geometry, SceneGeometry, SceneParams, Shape, ShapeKind, ToyScene,
};

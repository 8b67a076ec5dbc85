//! MNIST ingestion and the permuted / rotated task streams.

mod idx;
mod stream;

pub use idx::{
    encode_images, encode_labels, load_mnist, missing_mnist_files, parse_idx, read_idx_file, IdxData, ImageSet,
    IMAGES_MAGIC, LABELS_MAGIC, NUM_CLASSES,
};
pub use stream::{
    make_permuted_stream, make_rotated_stream, make_stream, rotate_bilinear, Split, Task, TaskKind, TaskStream,
    Transform, ROTATION_STEP_DEGREES,
};

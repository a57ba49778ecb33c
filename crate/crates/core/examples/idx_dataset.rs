// Loads the bundled MNIST subset, keeps the first samples of each class and
// writes the first image of every class as a PGM file.

use std::path::Path;

use textcaps::data::{export_pgm, load_dataset, take_per_class, DatasetKind, Split};

pub fn run_example() -> textcaps::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist012");
    let train = load_dataset(&dir, DatasetKind::Mnist, Split::Train)?.with_class_count(3)?;
    println!("{} training images of {}x{}, per class {:?}", train.len(), train.height(), train.width(), train.class_histogram());

    let (subset, shortfalls) = take_per_class(&train, 20)?;
    println!("subset of {} images, {} short classes", subset.len(), shortfalls.len());

    let out = std::env::temp_dir().join("textcaps-idx-example");
    std::fs::create_dir_all(&out)?;
    for class in 0..subset.class_count() {
        let i = subset.labels().iter().position(|&l| l == class).expect("every class present");
        let path = out.join(format!("class{class}.pgm"));
        export_pgm(subset.image(i), 28, 28, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}

// Writing and reading a `.icw` container, and what a bad file looks like.

use icdilate::{generate, Distribution, Error, LayerDecl, LayerSpec, ModelContainer};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let layers = vec![
        LayerDecl::new(LayerSpec::new("conv1", 1, 2, 3, 8), true),
        LayerDecl::new(LayerSpec::new("conv2", 1, 2, 8, 8).with_groups(8), false),
    ];
    let model = generate(4, &layers, Distribution::Gaussian { sigma: 0.5 })?;
    let bytes = model.to_bytes()?;
    println!("{} bytes, header {}", bytes.len(), model.provenance);
    assert_eq!(ModelContainer::from_bytes(&bytes)?, model);

    let dir = std::env::temp_dir().join(format!("icw-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.icw");
    model.write(&path)?;
    assert_eq!(ModelContainer::read(&path)?, model);
    std::fs::remove_dir_all(&dir)?;

    let truncated = ModelContainer::from_bytes(&bytes[..bytes.len() - 64]);
    println!("truncated: {}", truncated.as_ref().unwrap_err());
    assert!(matches!(truncated, Err(Error::TruncatedTensor(_))));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(ModelContainer::from_bytes(&wrong), Err(Error::BadMagic)));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

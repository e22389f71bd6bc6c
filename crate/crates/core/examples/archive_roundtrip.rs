//! Write a small archive, read it back and build a task vector.

use linmerge::archive::{task_vector, Tensor, TensorArchive};

fn main() -> linmerge::Result<()> {
    let dir = std::env::temp_dir().join("linmerge-archive-example");
    std::fs::create_dir_all(&dir).unwrap();

    let mut base = TensorArchive::new();
    base.insert("w", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?)?;
    base.insert("b", Tensor::new(vec![3], vec![0.0, 0.0, 0.0])?)?;
    base.meta_mut().insert("kind".into(), "base".into());

    let mut tuned = base.clone();
    tuned.meta_mut().insert("kind".into(), "fine_tuned".into());
    tuned.insert("b", Tensor::new(vec![3], vec![0.5, -0.5, 0.25])?)?;

    let path = dir.join("tuned.tza");
    tuned.write(&path)?;
    let back = TensorArchive::read(&path)?;
    assert_eq!(back, tuned);
    println!(
        "{} tensors, {} bytes on disk",
        back.len(),
        std::fs::metadata(&path).unwrap().len()
    );

    let tau = task_vector(&back, &base)?;
    for (name, t) in tau.iter() {
        println!("tau[{name}] = {:?}", t.data());
    }
    Ok(())
}

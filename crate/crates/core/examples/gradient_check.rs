//! The finite-difference gradient suite, as run by `sardiff gradcheck`.

fn main() {
    for e in sardiff::gradsuite::run(0) {
        match e.outcome {
            Ok(r) => println!("{:<18} ok   max err {:.2e} ({} elements)", e.name, r.max_error(), r.checked),
            Err(err) => println!("{:<18} FAIL {err}", e.name),
        }
    }
}

//! Forward BIC search on the bundled M. bovis data.

use binmix::{data, forward_search, FitConfig};

fn main() -> binmix::Result<()> {
    let d = data::mbovis();
    let started = std::time::Instant::now();
    let sel = forward_search(&d, &FitConfig::default(), 6)?;
    for c in &sel.grid {
        println!(
            "({}, {})  bic {:8.2}  loglik {:9.3}  iterations {:5}  converged {}",
            c.k1, c.k2, c.bic, c.loglik, c.n_iterations, c.converged
        );
    }
    let f = &sel.selected_fit;
    println!("selected {:?} in {:.1?}", sel.selected, started.elapsed());
    println!(
        "G support {:?} weights {:?}",
        f.params.g.support(),
        f.params.g.weights()
    );
    println!(
        "H support {:?} weights {:?}",
        f.params.h.support(),
        f.params.h.weights()
    );
    println!("beta {:?}", f.params.beta);
    println!("ridge {} reason {:?}", f.ridge, f.reason);
    Ok(())
}

//! Regenerates `assets/insurance_scm.json` from the published seed.

use ncmfair::scm::{LinearGaussianScm, DEFAULT_SCM_SEED};

fn main() -> ncmfair::Result<()> {
    let scm = LinearGaussianScm::seeded(DEFAULT_SCM_SEED)?;
    print!("{}", scm.to_json()?);
    Ok(())
}

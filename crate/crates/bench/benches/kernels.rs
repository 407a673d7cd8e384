use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use qtele_bench::effective_space;
use qtele_core::dynamics::{build_effective_hamiltonian, expm_evolution, site_hamiltonian, Model, SiteLasers};
use qtele_core::{Drive, LaserConfig, PhysicalParams, StateVector, ALICE, C64};
use rand::{Rng, SeedableRng};

fn random_state(dim: usize) -> StateVector {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut psi = StateVector::new((0..dim).map(|_| C64::new(rng.gen(), rng.gen())).collect());
    psi.normalize().unwrap();
    psi
}

fn expm(c: &mut Criterion) {
    let space = effective_space();
    let p = PhysicalParams::paper();
    let mut lasers = SiteLasers::dark(3);
    lasers.drives[0] = Drive::BOTH;
    let h: DMatrix<C64> = site_hamiltonian(&space, &p, Model::Effective, ALICE, &lasers).unwrap().to_dense();
    c.bench_function("expm alice site (48x48)", |b| b.iter(|| expm_evolution(black_box(&h), 1.0e3)));
}

fn sparse_apply(c: &mut Criterion) {
    let space = effective_space();
    let lasers = LaserConfig::dark(&space).with(ALICE, 2, Drive::L).unwrap();
    let h = build_effective_hamiltonian(&PhysicalParams::paper(), &lasers, &space).unwrap();
    let psi = random_state(space.dim());
    c.bench_function("sparse H·ψ (full effective space)", |b| b.iter(|| h.apply(black_box(&psi)).unwrap()));
}

criterion_group!(benches, expm, sparse_apply);
criterion_main!(benches);

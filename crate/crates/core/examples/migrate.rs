//! Live-migrates a desk-scale GPT-2 inference process halfway through its
//! run and compares downtime against a stop-the-world checkpoint.
//!
//! `cargo run --release --example migrate [profile]`

use gpucr::config::Config;
use gpucr::cr::{Action, CkptMode, ContextPool, RestoreMode};
use gpucr::harness::{generate, reference_final, trigger_seq, WorkloadProfile};
use gpucr::image::write_image;
use gpucr::process::{Process, Trigger};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "gpt2-infer".into());
    let profile = WorkloadProfile::desk(&name).expect("known profile name");
    let w = generate(&profile);
    let cfg = Config::default();
    let at = trigger_seq(&w.trace, 0.5);
    let want = reference_final(&cfg, &w.trace).unwrap();

    for mode in [CkptMode::StopTheWorld, CkptMode::DirtyBit] {
        let mut src = Process::new(cfg.clone(), w.shared_trace());
        src.add_trigger(Trigger::At(at), Action::migrate(mode));
        src.run().unwrap();
        let (img, m) = (&src.images[0], &src.reports[0]);

        let mut pool = ContextPool::new(cfg.pool_size, cfg.context_creation_ns);
        let mut dst = Process::restore(cfg.clone(), img, w.shared_trace(), RestoreMode::OnDemand, &mut pool).unwrap();
        dst.run().unwrap();
        assert!(dst.state().diff(&want).is_none());

        println!(
            "{name} {mode:?}: downtime {} ns, image {} bytes, dedup saved {} bytes",
            m.downtime_ns,
            write_image(img).unwrap().len(),
            m.bytes_dedup_saved
        );
    }
}

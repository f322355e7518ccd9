use std::time::Instant;
use tinydetr::config::RunConfig;
use tinydetr::data::gen_synthetic;
use tinydetr::train::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cdn = args.get(1).map(|s| s == "cdn").unwrap_or(true);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let images: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(150);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let cap: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(10);

    let mut cfg = RunConfig::default();
    cfg.train_images = images;
    cfg.val_images = 48;
    cfg.epochs = epochs;
    cfg.lr_drop_epoch = epochs.saturating_sub(2);
    cfg.seed = seed;
    cfg.cdn_on = cdn;
    cfg.lr = lr;
    cfg.lr_backbone = lr * 0.1;
    cfg.cdn_pair_capacity = cap;
    cfg.validate().unwrap();
    let (tr, va) = gen_synthetic(&cfg.gen_config());
    let dir = std::env::temp_dir().join(format!("tinydetr_b_{cdn}_{seed}_{cap}"));
    let t0 = Instant::now();
    let out = train(&cfg, &tr, &va, &dir, None).unwrap();
    let first = &out.rows[0];
    let last = out.rows.last().unwrap();
    println!(
        "cdn={cdn} cap={cap} seed={seed} {:.0?} | loss {:.3} -> {:.3} (ratio {:.3}) | ap50 {:.2} ap {:.2} dup {:.4} atd {:.3}",
        t0.elapsed(), first.loss, last.loss, last.loss / first.loss, last.ap50, last.ap, last.duplicate_rate, last.atd100
    );
    for r in &out.rows {
        eprintln!(
            "  epoch {} loss {:.3} dn {:.3} ap50 {:.2} dup {:.4}",
            r.epoch, r.loss, r.loss_dn, r.ap50, r.duplicate_rate
        );
    }
}

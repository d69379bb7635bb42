use irregular_core::dataset::*;
use irregular_core::gp::*;

fn main() {
    let dir = std::path::Path::new("/tmp/smoke_gp");
    let (scored, _) = load_dataset(dir.join("scored.jsonl")).unwrap();
    let m_reg = GpModel::load(dir.join("model_regular.json")).unwrap();
    let m_oth = GpModel::load(dir.join("model_other.json")).unwrap();
    println!("regular hyper: {:?}", m_reg.hyper);
    println!("other   hyper: {:?}", m_oth.hyper);
    println!("regular train ll: {}", m_reg.train_log_likelihood());
    println!("other   train ll: {}", m_oth.train_log_likelihood());

    for status in [Status::Regular, Status::Irregular, Status::Other] {
        let mut lls = Vec::new();
        for img in scored.test().filter(|r| r.status == status).take(8) {
            let test = test_proposals(img, 20).unwrap();
            let lr = conditional_log_likelihood(&m_reg, &test).unwrap();
            let lo = conditional_log_likelihood(&m_oth, &test).unwrap();
            lls.push((lr, lo, -lr.max(lo)));
        }
        println!("{status:?}:");
        for (lr, lo, s) in &lls {
            println!("  ll_reg {lr:9.3}  ll_oth {lo:9.3}  irregularity {s:9.3}");
        }
    }

    // detector score stats per status
    for status in [Status::Regular, Status::Irregular, Status::Other] {
        let mut maxes = Vec::new();
        let mut top20m = Vec::new();
        for img in scored.test().filter(|r| r.status == status) {
            let mut s: Vec<f64> = img.proposals.iter().filter_map(|p| p.score).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            maxes.push(s[0]);
            top20m.push(s[..20.min(s.len())].iter().sum::<f64>() / 20.0);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!("{status:?}: mean max {:.3}, mean top20 {:.3}", mean(&maxes), mean(&top20m));
    }
}

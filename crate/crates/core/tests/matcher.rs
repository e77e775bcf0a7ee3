use timnet::datagen::{Corpus, CorpusConfig};
use timnet::encoders::leaf_batch;
use timnet::layers::Mode;
use timnet::matcher::{build_pairs, evaluate_matching, match_probabilities, pretrain, PairedData, PairedExample, PretrainConfig, TimNet, TimNetConfig};
use timnet::tensor::{AdamConfig, AdamState, Tape, Tensor};
use timnet::train::optimizer_step;
use timnet::Error;

fn corpus(n: usize, s: u64) -> (Corpus, PairedData<f32>) {
    let c = Corpus::generate(n, s, &CorpusConfig::default()).unwrap();
    let v = c.vocabulary();
    let d = PairedData::from_corpus(&c, &v, 32);
    (c, d)
}

fn net(seed: u64) -> TimNet<f32> {
    TimNet::new(&TimNetConfig::default(), seed).unwrap()
}

#[test]
fn forward_is_head_of_absolute_embedding_difference() {
    let (_, data) = corpus(6, 1);
    let net = net(2);
    let pairs = build_pairs(6, 1.0, 3).unwrap();
    let (x, ids, _) = data.batch(&pairs[..4]).unwrap();
    let mut t = Tape::new();
    let xv = t.leaf(&x);
    let fused = net.match_forward(&mut t, &ids, xv, Mode::Eval).unwrap();
    let mut m = Tape::new();
    let xv = m.leaf(&x);
    let vt = net.text.forward(&net.store, &mut m, &ids, Mode::Eval).unwrap();
    let vi = net.image.forward(&net.store, &mut m, xv, Mode::Eval).unwrap();
    let d = m.abs_diff(vi, vt).unwrap();
    let manual = net.head.forward(&net.store, &mut m, d).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(t.value(fused)), bits(m.value(manual)));
}

#[test]
fn zero_initialized_head_is_at_chance() {
    let (_, data) = corpus(8, 4);
    let net = net(5);
    let pairs = build_pairs(8, 1.0, 6).unwrap();
    let (x, ids, targets) = data.batch(&pairs).unwrap();
    let mut t = Tape::new();
    let xv = t.leaf(&x);
    let logits = net.match_forward(&mut t, &ids, xv, Mode::Train).unwrap();
    assert!(t.value(logits).iter().all(|&v| v == 0.0));
    assert!(match_probabilities(t.value(logits)).iter().all(|&p| p == 0.5));
    let loss = t.cross_entropy(logits, &targets).unwrap();
    assert!((f64::from(t.value(loss)[0]) - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn equal_embeddings_reduce_to_head_of_zero() {
    let (_, data) = corpus(5, 7);
    let mut net = net(8);
    for name in ["text_encoder.fc.weight", "text_encoder.fc.bias", "image_encoder.fc.weight", "image_encoder.fc.bias"] {
        let shape = net.store.by_name(name).unwrap().shape().to_vec();
        net.store.assign(name, &Tensor::zeros(&shape)).unwrap();
    }
    net.store
        .assign("match_head.fc2.bias", &Tensor::new(&[2], vec![0.3, -0.2]).unwrap())
        .unwrap();
    let mut t = Tape::new();
    let zero = t.leaf(&Tensor::zeros(&[1, 64]));
    let h0 = net.head.forward(&net.store, &mut t, zero).unwrap();
    let h0 = t.value(h0).to_vec();
    let pairs = build_pairs(5, 1.0, 9).unwrap();
    let (x, ids, _) = data.batch(&pairs).unwrap();
    let xv = t.leaf(&x);
    let logits = net.match_forward(&mut t, &ids, xv, Mode::Eval).unwrap();
    for row in t.value(logits).chunks(2) {
        assert_eq!(row, h0.as_slice());
    }
}

#[test]
fn pairs_are_valid_balanced_and_seeded() {
    let pairs = build_pairs(1000, 1.0, 11).unwrap();
    let trues = pairs.iter().filter(|p| p.is_match).count();
    assert_eq!(trues, 500 * 2);
    assert_eq!(pairs.len() - trues, 1000);
    assert!(pairs.iter().all(|p| p.is_match == (p.image == p.report)));
    assert_eq!(pairs, build_pairs(1000, 1.0, 11).unwrap());
    assert_ne!(pairs, build_pairs(1000, 1.0, 12).unwrap());
    let two = build_pairs(2, 1.0, 0).unwrap();
    let neg: Vec<&PairedExample> = two.iter().filter(|p| !p.is_match).collect();
    assert_eq!(neg.len(), 2);
    assert!(neg.iter().all(|p| p.report == 1 - p.image));
    assert!(matches!(build_pairs(1, 1.0, 0), Err(Error::Data(_))));
}

#[test]
fn single_repeated_pair_is_memorized() {
    let (_, data) = corpus(4, 13);
    let mut net = net(14);
    let pair = [PairedExample { image: 2, report: 2, is_match: true }];
    let (x, ids, targets) = data.batch(&pair).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() });
    let mut last = f32::INFINITY;
    for _ in 0..200 {
        let mut t = Tape::new();
        let xv = leaf_batch(&mut t, &x).unwrap();
        let logits = net.match_forward(&mut t, &ids, xv, Mode::Train).unwrap();
        let loss = t.cross_entropy(logits, &targets).unwrap();
        last = t.value(loss)[0];
        optimizer_step(&mut t, loss, &mut net.store, &mut adam).unwrap();
    }
    assert!(last < 0.01, "loss {last}");
}

#[test]
fn pretraining_lowers_training_loss_and_is_reproducible() {
    let (_, train) = corpus(160, 15);
    let (_, val) = corpus(40, 16);
    let vpairs = build_pairs(val.len(), 1.0, 17).unwrap();
    let cfg = PretrainConfig {
        epochs: 4,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        ..PretrainConfig::default()
    };
    let run = || {
        let mut n = net(18);
        let log = pretrain(&mut n, &train, Some((&val, &vpairs)), &cfg, 19).unwrap();
        (n, log)
    };
    let (n, log) = run();
    let train_rows: Vec<_> = log.iter().filter(|r| r.split == "train").collect();
    assert_eq!(train_rows.len(), 4);
    assert_eq!(log.len(), 8);
    assert!(train_rows[3].loss < train_rows[0].loss, "{log:?}");
    let (n2, log2) = run();
    assert_eq!(log, log2);
    let bits = |n: &TimNet<f32>| n.store.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&n), bits(&n2));
}

#[test]
fn single_class_evaluation_is_undefined() {
    let (_, data) = corpus(4, 20);
    let trues: Vec<PairedExample> = (0..4).map(|i| PairedExample { image: i, report: i, is_match: true }).collect();
    assert!(matches!(evaluate_matching(&net(21), &data, &trues), Err(Error::Undefined(_))));
}

#[test]
fn mismatched_branch_widths_fail_at_construction() {
    let mut cfg = TimNetConfig::default();
    cfg.image.d_emb = 32;
    assert!(matches!(TimNet::<f32>::new(&cfg, 0), Err(Error::Config { .. })));
}

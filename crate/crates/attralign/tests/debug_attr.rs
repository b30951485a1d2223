use attralign::data::{gen_synthetic, records_to_jsonl, Dataset, SyntheticSpec};
use attralign::eval::attribute_retrieve;
use attralign::textparse::TextPipeline;
use attralign::trainer::{fit, TrainConfig};
use attralign::types::AttributeCategory;
use attralign::vecops::ZeroNormPolicy;

#[test]
fn debug_attr_retrieve() {
    let spec = SyntheticSpec {
        n_identities: 50,
        values_per_category: 8,
        noise_sigma: 0.1,
        records_per_identity: 4,
        d_in: 48,
        seed: 7,
    };
    let pipeline = TextPipeline::embedded_default();
    let data = gen_synthetic(&spec).unwrap();
    let train = Dataset::from_jsonl_str(&records_to_jsonl(&data.train), "t", &pipeline).unwrap();
    let val = Dataset::from_jsonl_str(&records_to_jsonl(&data.val), "v", &pipeline).unwrap();
    let cfg = TrainConfig {
        batch_size: 64, epochs: 40, learning_rate: 5e-3, lr_decay_epoch: Some(30),
        embed_dim: 48, seed: 7, k: 8, ..Default::default()
    };
    let result = fit(&train, &val, &cfg).unwrap();
    let gallery: Vec<_> = val.visual().cloned().collect();
    let out = attribute_retrieve("white shirt", &gallery, &result.checkpoint.model,
        &pipeline, AttributeCategory::UpperBody, ZeroNormPolicy::Strict).unwrap();
    println!("query_label = {:?}", out.query_label);
    let upper = AttributeCategory::UpperBody.index();
    for (rank, &(gi, score)) in out.ranking.ranked().iter().take(8).enumerate() {
        println!("rank {rank}: gallery {gi} score {score:.4} label {:?} person {}",
            gallery[gi].attr_labels[upper], gallery[gi].person_id);
    }
    let n_white = gallery.iter().filter(|r| r.attr_labels[upper] == Some(0)).count();
    println!("white-upper gallery items: {n_white}; r1={:?} ap={:?}", out.r1, out.ap);
}

#[test]
fn debug_query_vs_textual() {
    let spec = SyntheticSpec {
        n_identities: 50,
        values_per_category: 8,
        noise_sigma: 0.1,
        records_per_identity: 4,
        d_in: 48,
        seed: 7,
    };
    let pipeline = TextPipeline::embedded_default();
    let data = gen_synthetic(&spec).unwrap();
    let train = Dataset::from_jsonl_str(&records_to_jsonl(&data.train), "t", &pipeline).unwrap();
    let val = Dataset::from_jsonl_str(&records_to_jsonl(&data.val), "v", &pipeline).unwrap();
    let cfg = TrainConfig {
        batch_size: 64, epochs: 40, learning_rate: 5e-3, lr_decay_epoch: Some(30),
        embed_dim: 48, seed: 7, k: 8, ..Default::default()
    };
    let result = fit(&train, &val, &cfg).unwrap();
    let model = &result.checkpoint.model;
    let upper = AttributeCategory::UpperBody.index();

    // query embedding as attribute_retrieve builds it
    let phrase_vec = attralign::textparse::embed_phrase(
        &["white".to_string(), "shirt".to_string()], &pipeline.store).unwrap();
    let mut qf = attralign::encoder::RawFeatures::global_only(vec![0.0; 32]);
    qf.attrs[upper] = Some(phrase_vec.clone());
    let q = model.encode(&qf, attralign::Modality::Textual, 0).unwrap();
    let q_emb = q.attr(AttributeCategory::UpperBody).unwrap();

    // a white-upper textual val record
    let white_txt = val.textual().find(|r| r.attr_labels[upper] == Some(0)).unwrap();
    println!("textual white rec text: {:?}", white_txt.text);
    println!("raw feature equal to phrase vec: {}",
        white_txt.features.attrs[upper].as_ref().unwrap() == &phrase_vec);
    let enc = model.encode(&white_txt.features, attralign::Modality::Textual, 0).unwrap();
    let t_emb = enc.attr(AttributeCategory::UpperBody).unwrap();
    println!("cos(query, textual-white) = {}",
        attralign::vecops::cosine(q_emb, t_emb, ZeroNormPolicy::Strict).unwrap());

    // cos of that textual record against white and blue visual items
    for want in [0u32, 3] {
        let vis = val.visual().find(|r| r.attr_labels[upper] == Some(want)).unwrap();
        let venc = model.encode(&vis.features, attralign::Modality::Visual, 0).unwrap();
        let v_emb = venc.attr(AttributeCategory::UpperBody).unwrap();
        println!("cos(textual-white, visual-{want}) = {:.4}   cos(query, visual-{want}) = {:.4}",
            attralign::vecops::cosine(t_emb, v_emb, ZeroNormPolicy::Strict).unwrap(),
            attralign::vecops::cosine(q_emb, v_emb, ZeroNormPolicy::Strict).unwrap());
    }
}

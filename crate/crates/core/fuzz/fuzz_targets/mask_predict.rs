#![no_main]

use std::sync::OnceLock;

use cmtm::decoding::{mask_predict, DecodeOptions, RemaskRule};
use cmtm::model::{Model, ModelConfig};
use libfuzzer_sys::fuzz_target;

fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let config = ModelConfig {
            layers: 1,
            model_dim: 8,
            ffn_dim: 8,
            heads: 2,
            vocab_size: 12,
            max_source_len: 6,
            max_target_len: 6,
            ..ModelConfig::default()
        };
        Model::new(config, 0).expect("fixed config is valid")
    })
}

// byte 0: iterations, byte 1: length beam, byte 2: threshold or count rule,
// the rest: source token ids
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let opts = DecodeOptions {
        iterations: (data[0] % 12) as usize,
        length_beam: (data[1] % 8) as usize,
        remask: if data[2] < 128 { RemaskRule::Count } else { RemaskRule::Threshold(f64::from(data[2] - 128) / 100.0) },
        trace: data[2] % 2 == 0,
    };
    let src: Vec<u32> = data[3..].iter().map(|&b| u32::from(b % 16)).collect();
    if let Ok(result) = mask_predict(model(), &src, &opts) {
        assert!(result.best < result.hypotheses.len());
        for h in &result.hypotheses {
            assert_eq!(h.tokens.len(), h.length);
        }
    }
});

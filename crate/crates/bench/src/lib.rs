//! Fixtures shared by the benchmarks: the tiny model and rendered scene batches.

use candle_core::{DType, Device, Tensor};
use layoutdiff_core::diffusion::{DiffusionModel, ModelConfig};
use layoutdiff_core::query::TokenSequence;
use layoutdiff_core::scenegen::{
    generate_scene, render, scene_lexicon_vocab, scene_to_query, AreaTerciles, PositionWordRules, QueryMode, RasterImage,
    SceneConfig,
};

pub fn tiny_model() -> DiffusionModel {
    let cfg = ModelConfig::tiny();
    DiffusionModel::new(cfg.clone(), scene_lexicon_vocab(&cfg.quantizer), DType::F32, &Device::Cpu, 0).expect("tiny model")
}

pub fn scenes(n: usize, size: usize) -> Vec<(RasterImage, layoutdiff_core::Query)> {
    let cfg = SceneConfig { height: size, width: size, max_shapes: 2, min_side_px: size / 4, max_side_px: size / 2, ..Default::default() };
    let rules = PositionWordRules::new(AreaTerciles { small_max: 0.08, medium_max: 0.15 });
    (0..n as u64)
        .map(|i| {
            let s = generate_scene(i, &cfg).expect("scene");
            (render(&s), scene_to_query(&s, QueryMode::PositionTokens, &rules))
        })
        .collect()
}

pub fn batch(model: &DiffusionModel, n: usize) -> (Tensor, Vec<TokenSequence>) {
    let size = model.config().image_size;
    let (imgs, queries): (Vec<_>, Vec<_>) = scenes(n, size).into_iter().unzip();
    let seqs = queries.iter().map(|q| model.encode(q).expect("encodes")).collect();
    (model.images_to_latents(&imgs).expect("latents"), seqs)
}

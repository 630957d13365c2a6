use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use dgcf::backbone::{load_backbone, BackboneGeometry, TapSpec, WeightsInit, WeightsSource};
use dgcf::Error;

fn geometry() -> BackboneGeometry {
    BackboneGeometry::tiny(2, 16, 4)
}

#[test]
fn saved_weights_reload_with_same_features() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vit.safetensors");
    let standin = load_backbone(geometry(), WeightsInit::Standin { seed: 7 }, DType::F32, &Device::Cpu).unwrap();
    standin.save(&path).unwrap();

    let loaded = load_backbone(geometry(), WeightsInit::File(&path), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(loaded.source(), WeightsSource::PretrainedFile);
    assert!(loaded.frozen());
    assert_eq!(loaded.load_checksum(), standin.load_checksum());

    let x = standin.prepare_input(&Tensor::randn(0f32, 0.5, (1, 1, 16, 16), &Device::Cpu).unwrap()).unwrap();
    let taps = TapSpec::new(vec![1, 2]).unwrap();
    let a = standin.extract_features(&x, &taps).unwrap();
    let b = loaded.extract_features(&x, &taps).unwrap();
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(fa.dims(), fb.dims());
        let diff = (&fa.data - &fb.data).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}

#[test]
fn wrong_geometry_missing_tensor_and_absent_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vit.safetensors");
    load_backbone(geometry(), WeightsInit::Standin { seed: 0 }, DType::F32, &Device::Cpu)
        .unwrap()
        .save(&path)
        .unwrap();

    let wider = BackboneGeometry::tiny(2, 32, 4);
    assert!(matches!(
        load_backbone(wider, WeightsInit::File(&path), DType::F32, &Device::Cpu),
        Err(Error::Config(_))
    ));

    let deeper = BackboneGeometry::tiny(3, 16, 4);
    assert!(matches!(
        load_backbone(deeper, WeightsInit::File(&path), DType::F32, &Device::Cpu),
        Err(Error::WeightLoad { .. })
    ));

    let partial = dir.path().join("partial.safetensors");
    let t = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
    safetensors::serialize_to_file([("cls_token", &t)], None::<HashMap<String, String>>, &partial).unwrap();
    assert!(matches!(
        load_backbone(geometry(), WeightsInit::File(&partial), DType::F32, &Device::Cpu),
        Err(Error::WeightLoad { .. }) | Err(Error::Config(_))
    ));

    assert!(matches!(
        load_backbone(geometry(), WeightsInit::File(&dir.path().join("absent.safetensors")), DType::F32, &Device::Cpu),
        Err(Error::Io { .. })
    ));
}

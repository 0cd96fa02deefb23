//! Model checkpointing on top of the shared tensor-table container.

use super::{ModelConfig, SegModel, Variant};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn config_text(cfg: &ModelConfig, variant: Variant) -> String {
    let list = |v: &[usize]| {
        v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    };
    format!(
        "kind=checkpoint\nvariant={}\nimage_size={}\nin_channels={}\nembed_dim={}\n\
         teacher_channels={}\nstudent_channels={}\nattn_dim={}\nmlp_dim={}\n\
         decoder_layers={}\nmask_channels={}\nnum_masks={}\n",
        variant.as_str(),
        cfg.image_size,
        cfg.in_channels,
        cfg.embed_dim,
        list(&cfg.teacher_channels),
        list(&cfg.student_channels),
        cfg.attn_dim,
        cfg.mlp_dim,
        cfg.decoder_layers,
        cfg.mask_channels,
        cfg.num_masks,
    )
}

fn parse_config(c: &Container) -> Result<(ModelConfig, Variant)> {
    let get = |key: &str| {
        c.config_value(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config missing `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| Error::Format(format!("bad numeric field `{key}`")))
    };
    let nums = |key: &str| -> Result<Vec<usize>> {
        get(key)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad list field `{key}`"))))
            .collect()
    };
    let cfg = ModelConfig {
        image_size: num("image_size")?,
        in_channels: num("in_channels")?,
        embed_dim: num("embed_dim")?,
        teacher_channels: nums("teacher_channels")?,
        student_channels: nums("student_channels")?,
        attn_dim: num("attn_dim")?,
        mlp_dim: num("mlp_dim")?,
        decoder_layers: num("decoder_layers")?,
        mask_channels: num("mask_channels")?,
        num_masks: num("num_masks")?,
    };
    let variant = Variant::parse(get("variant")?)?;
    Ok((cfg, variant))
}

pub fn save_checkpoint(model: &SegModel, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new(config_text(&model.cfg, model.variant));
    for (name, t) in model.params() {
        c.push(name, t.shape(), t.data().to_vec());
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegModel> {
    let c = Container::read_from(path)?;
    match c.config_value("kind") {
        Some("checkpoint") => {}
        other => {
            return Err(Error::Format(format!(
                "container kind {:?} is not a checkpoint",
                other.unwrap_or("<none>")
            )))
        }
    }
    let (cfg, variant) = parse_config(&c)?;
    let mut model = SegModel::new(&cfg, variant, 0)?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    for (name, slot) in names.into_iter().zip(model.params_mut()) {
        let rec = c.require(&name)?;
        if rec.dims != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has dims {:?}, model expects {:?}",
                rec.dims,
                slot.shape()
            )));
        }
        *slot = Tensor::param(&rec.dims, rec.data.clone());
    }
    Ok(model)
}

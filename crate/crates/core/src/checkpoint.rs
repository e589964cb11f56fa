//! Model checkpoints in the shared container format.

use std::path::Path;

use crate::container::{Container, ContainerError, Payload, CHECKPOINT_MAGIC};
use crate::diffengine::Tensor;
use crate::model::{LatentPartition, ModalitySpec, MultimodalVAE};

fn malformed(msg: String) -> ContainerError {
    ContainerError::Malformed(msg)
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

fn split(s: &str) -> Result<Vec<usize>, ContainerError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|e| malformed(format!("bad list {s:?}: {e}"))))
        .collect()
}

/// Container holding the architecture as meta lines, `extra` meta, and the
/// parameters in model order.
pub fn model_to_container(model: &MultimodalVAE<f32>, extra: &[(String, String)]) -> Container {
    let mut c = Container::new(CHECKPOINT_MAGIC);
    c.push_meta("modalities", model.modalities());
    for (j, s) in model.specs().iter().enumerate() {
        c.push_meta(&format!("m{j}.name"), &s.name);
        c.push_meta(&format!("m{j}.elements"), s.element_count);
        c.push_meta(&format!("m{j}.likelihood"), s.likelihood);
        c.push_meta(&format!("m{j}.hidden"), join(&s.hidden));
    }
    c.push_meta("c_dim", model.partition().c_dim);
    c.push_meta("s_dims", join(&model.partition().s_dims));
    for (k, v) in extra {
        c.push_meta(k, v);
    }
    for (name, p) in model.param_names().iter().zip(model.params()) {
        c.push(name, p.shape().to_vec(), Payload::F32(p.data().to_vec()));
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<MultimodalVAE<f32>, ContainerError> {
    let num = |key: &str| -> Result<usize, ContainerError> {
        c.require_meta(key)?
            .parse()
            .map_err(|e| malformed(format!("meta {key}: {e}")))
    };
    let m = num("modalities")?;
    let mut specs = Vec::with_capacity(m);
    for j in 0..m {
        specs.push(ModalitySpec {
            name: c.require_meta(&format!("m{j}.name"))?.to_string(),
            element_count: num(&format!("m{j}.elements"))?,
            likelihood: c.require_meta(&format!("m{j}.likelihood"))?.parse().map_err(malformed)?,
            hidden: split(c.require_meta(&format!("m{j}.hidden"))?)?,
        });
    }
    let partition = LatentPartition::new(num("c_dim")?, split(c.require_meta("s_dims")?)?);
    let named = c
        .entries
        .iter()
        .map(|e| match &e.payload {
            Payload::F32(v) => Tensor::new(e.shape.clone(), v.clone())
                .map(|t| (e.name.clone(), t))
                .map_err(|err| malformed(err.to_string())),
            Payload::U32(_) => Err(malformed(format!("parameter {} must be f32", e.name))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    MultimodalVAE::from_params(specs, partition, named).map_err(|e| malformed(e.to_string()))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &MultimodalVAE<f32>,
    extra: &[(String, String)],
) -> Result<(), ContainerError> {
    model_to_container(model, extra).save(path)
}

/// The model and the whole container, so callers can read their meta keys.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MultimodalVAE<f32>, Container), ContainerError> {
    let c = Container::load(path, CHECKPOINT_MAGIC)?;
    Ok((model_from_container(&c)?, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Likelihood;

    #[test]
    fn checkpoint_round_trip() {
        let specs = vec![
            ModalitySpec {
                name: "mod_a".into(),
                element_count: 4,
                likelihood: Likelihood::Laplace { scale: 0.25 },
                hidden: vec![3, 2],
            },
            ModalitySpec {
                name: "mod_c".into(),
                element_count: 6,
                likelihood: Likelihood::Categorical { alphabet: 3 },
                hidden: vec![],
            },
        ];
        let m = MultimodalVAE::<f32>::new(specs, LatentPartition::new(2, vec![1, 0]), 5).unwrap();
        let extra = vec![("objective".to_string(), "mmjsd".to_string())];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmjs");
        save_checkpoint(&path, &m, &extra).unwrap();
        let (back, c) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(c.meta("objective"), Some("mmjsd"));
        assert_eq!(model_to_container(&back, &extra).to_bytes().unwrap(), std::fs::read(&path).unwrap());
        assert!(matches!(
            crate::data::load_dataset(&path),
            Err(crate::data::DataError::Container(ContainerError::BadMagic { .. }))
        ));
    }

    #[test]
    fn likelihood_text_round_trips() {
        for l in [
            Likelihood::Gaussian { scale: 1.0 },
            Likelihood::Laplace { scale: 0.1 },
            Likelihood::Categorical { alphabet: 27 },
        ] {
            assert_eq!(l.to_string().parse::<Likelihood>().unwrap(), l);
        }
        assert!("poisson:1".parse::<Likelihood>().is_err());
        assert!("gaussian".parse::<Likelihood>().is_err());
    }
}

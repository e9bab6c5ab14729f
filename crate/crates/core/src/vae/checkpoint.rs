//! Checkpoint directory: `model.txt` header plus one `DTNS` file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{InputKind, Vae, VaeArch, VaeModel};
use crate::nn::{Activation, Dense, Mlp};
use crate::tensorio::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

const HEADER: &str = "model.txt";
const FORMAT: &str = "disentlab-vae/1";

fn activation_str(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s.split_once(':') {
        None if s == "relu" => Ok(Activation::Relu),
        Some(("leaky_relu", slope)) => slope
            .parse()
            .map(Activation::LeakyRelu)
            .map_err(|_| Error::Format(format!("bad activation slope `{slope}`"))),
        _ => Err(Error::Format(format!("unknown activation `{s}`"))),
    }
}

fn save_mlp(dir: &Path, prefix: &str, mlp: &Mlp<f32>) -> Result<()> {
    for (i, layer) in mlp.layers.iter().enumerate() {
        let w = Tensor::from_matrix(&layer.weight);
        let b = Tensor::new(vec![layer.bias.len()], layer.bias.to_vec())?;
        write_tensor(dir.join(format!("{prefix}.{i}.weight.dtns")), &w)?;
        write_tensor(dir.join(format!("{prefix}.{i}.bias.dtns")), &b)?;
    }
    Ok(())
}

fn load_mlp(dir: &Path, prefix: &str, sizes: &[usize], activation: Activation) -> Result<Mlp<f32>> {
    let mut layers = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        let weight = read_tensor(dir.join(format!("{prefix}.{i}.weight.dtns")))?;
        let bias = read_tensor(dir.join(format!("{prefix}.{i}.bias.dtns")))?;
        if weight.shape() != [w[0], w[1]] || bias.shape() != [w[1]] {
            return Err(Error::Format(format!(
                "{prefix} layer {i}: shapes {:?}/{:?}, header expects [{}, {}]",
                weight.shape(),
                bias.shape(),
                w[0],
                w[1]
            )));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((w[0], w[1]), weight.into_data()).expect("shape checked"),
            bias: Array1::from(bias.into_data()),
        });
    }
    Ok(Mlp { layers, activation })
}

pub fn save_model(model: &VaeModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let a = &model.arch;
    let hidden: Vec<String> = a.hidden.iter().map(usize::to_string).collect();
    let header = format!(
        "format={FORMAT}\ninput_kind={}\ninput_dim={}\nhidden={}\nlatent={}\nactivation={}\nbeta={}\nseed={}\n",
        a.input_kind,
        a.input_dim,
        hidden.join(","),
        a.latent,
        activation_str(a.activation),
        model.beta,
        model.seed
    );
    let path = dir.join(HEADER);
    fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
    save_mlp(dir, "encoder", &model.encoder)?;
    save_mlp(dir, "decoder", &model.decoder)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<VaeModel> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let fields: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_once('=').ok_or_else(|| Error::Format(format!("bad header line `{l}`"))))
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}`")))
    };
    if get("format")? != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", get("format")?)));
    }
    let hidden = match get("hidden")? {
        "" => Vec::new(),
        h => h
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad hidden width `{v}`"))))
            .collect::<Result<Vec<usize>>>()?,
    };
    let arch = VaeArch {
        input_dim: num("input_dim")?,
        hidden,
        latent: num("latent")?,
        input_kind: get("input_kind")?.parse::<InputKind>()?,
        activation: parse_activation(get("activation")?)?,
    };
    let mut enc = vec![arch.input_dim];
    enc.extend(&arch.hidden);
    enc.push(2 * arch.latent);
    let mut dec = vec![arch.latent];
    dec.extend(arch.hidden.iter().rev());
    dec.push(arch.input_dim);
    let encoder = load_mlp(dir, "encoder", &enc, arch.activation)?;
    let decoder = load_mlp(dir, "decoder", &dec, arch.activation)?;
    Ok(Vae {
        encoder,
        decoder,
        arch,
        beta: get("beta")?.parse().map_err(|_| Error::Format("bad `beta`".into()))?,
        seed: get("seed")?.parse().map_err(|_| Error::Format("bad `seed`".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_reproduces_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = VaeArch::new(12, InputKind::Image).with_hidden(vec![7, 5]).with_latent(3);
        let model: VaeModel = Vae::init(arch, 2.0, 4, &mut rng).unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        let x = Array2::from_shape_fn((5, 12), |(i, j)| ((i * 12 + j) as f32 * 0.1).cos());
        let bits = |m: &VaeModel| {
            let (mu, var) = m.encode(x.view()).unwrap();
            mu.iter().chain(var.iter()).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&model));
    }

    #[test]
    fn corrupt_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(HEADER), "format=other\n").unwrap();
        assert!(load_model(dir.path()).is_err());
        assert!(load_model(dir.path().join("missing")).is_err());
    }
}

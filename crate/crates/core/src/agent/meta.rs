//! Agent checkpoints: `SIMTCKPT1` parameter files for the agent and the
//! baseline plus a key-value metadata block.
//!
//! ```text
//! format = simt-agent-1
//! text_dim = 320
//! emb_dim = 200
//! hidden_dim = 320
//! init = none | grid ROWSxCOLS | concepts ROWSxCOLS
//! attend = none | grid ROWSxCOLS | concepts ROWSxCOLS
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{AgentNetwork, AgentSpec, BaselineNetwork};
use crate::checkpoint::{params_from_bytes, params_to_bytes};
use crate::env::meta::{format_visual, parse_key_values, parse_visual};
use crate::error::{Result, SimtError};

const FORMAT: &str = "simt-agent-1";

pub fn agent_metadata(spec: &AgentSpec) -> String {
    format!(
        "format = {FORMAT}\ntext_dim = {}\nemb_dim = {}\nhidden_dim = {}\ninit = {}\nattend = {}\n",
        spec.text_dim,
        spec.emb_dim,
        spec.hidden_dim,
        format_visual(spec.init),
        format_visual(spec.attend),
    )
}

pub fn parse_agent_metadata(text: &str) -> Result<AgentSpec> {
    let kv = parse_key_values(text)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| SimtError::Config(format!("metadata lacks {k}")));
    if get("format")? != FORMAT {
        return Err(SimtError::Config(format!("unknown agent format {:?}", get("format")?)));
    }
    let dim = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| SimtError::Config(format!("{k} is not an integer")))
    };
    let spec = AgentSpec {
        text_dim: dim("text_dim")?,
        emb_dim: dim("emb_dim")?,
        hidden_dim: dim("hidden_dim")?,
        init: parse_visual(get("init")?)?,
        attend: parse_visual(get("attend")?)?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn save_agent(agent: &AgentNetwork, baseline: &BaselineNetwork, dir: &Path) -> Result<()> {
    fs::write(dir.join("agent.ckpt"), params_to_bytes(&agent.params))?;
    fs::write(dir.join("baseline.ckpt"), params_to_bytes(&baseline.params))?;
    fs::write(dir.join("agent.meta"), agent_metadata(&agent.spec))?;
    Ok(())
}

pub fn agent_from_parts(meta: &str, agent: &[u8], baseline: &[u8]) -> Result<(AgentNetwork, BaselineNetwork)> {
    let spec = parse_agent_metadata(meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = AgentNetwork::new(spec, &mut rng)?.with_params(&params_from_bytes(agent)?)?;
    let b = BaselineNetwork::new(spec, &mut rng)?.with_params(&params_from_bytes(baseline)?)?;
    Ok((a, b))
}

pub fn load_agent(dir: &Path) -> Result<(AgentNetwork, BaselineNetwork)> {
    agent_from_parts(
        &fs::read_to_string(dir.join("agent.meta"))?,
        &fs::read(dir.join("agent.ckpt"))?,
        &fs::read(dir.join("baseline.ckpt"))?,
    )
}

//! `key = value` config files.
//!
//! One assignment per line; `#` starts a comment. Keys are checked against
//! the schema of the command reading the file, so a typo is an error rather
//! than a silently ignored setting.

use std::collections::BTreeMap;
use std::str::FromStr;

use hyperdistill::architectures::{parse_feature_transform, ArchKind, ArchitectureSpec, ContextEncoderKind, DropoutSite};
use hyperdistill::harness::{ExperimentConfig, TeacherMode};
use hyperdistill::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Canonical `key = value` rendering, sorted by key.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, (_, v))| format!("{k} = {v}\n")).collect()
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}` (line {line}): cannot parse `{v}`"))
            }),
        }
    }

    fn get_with<T>(&self, key: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => f(v)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("key `{key}` (line {line}): `{v}` is not a valid {what}"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get_with(key, "boolean", |v| match v {
            "true" | "on" | "yes" => Some(true),
            "false" | "off" | "no" => Some(false),
            _ => None,
        })
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get_with(key, "comma-separated list", |v| {
            v.split(',').map(|p| p.trim().parse().ok()).collect()
        })
    }

    /// Rejects any key outside `known`; keys ending in `.*` accept any
    /// suffix.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            let ok = known.iter().any(|pat| match pat.strip_suffix('*') {
                Some(prefix) => k.starts_with(prefix),
                None => k == *pat,
            });
            if !ok {
                let line = self.entries[k].0;
                return Err(Error::Config(format!("unknown key `{k}` (line {line})")));
            }
        }
        Ok(())
    }
}

const STUDENT_KEYS: [&str; 6] = [
    "hidden_layers",
    "hidden_width",
    "embed_dim",
    "attn_layers",
    "attn_heads",
    "attn_hidden",
];

/// Every key an experiment config may set.
pub const EXPERIMENT_KEYS: &[&str] = &[
    "seed",
    "n_train_morphs",
    "n_test_morphs",
    "n_pd_morphs",
    "transitions_per_morph",
    "min_limbs",
    "max_limbs",
    "teacher_mode",
    "dropout",
    "context_encoder",
    "feature_transform",
    "repeats",
    "epochs",
    "minibatch",
    "lr",
    "grad_clip",
    "dropout_p",
    "dropout_site",
    "ablation_epochs",
    "n_eval_states",
    "record_wall_time",
    "teacher_fit.n_states",
    "teacher_fit.epochs",
    "teacher_fit.minibatch",
    "teacher_fit.lr",
    "student.hidden_layers",
    "student.hidden_width",
    "student.embed_dim",
    "student.attn_layers",
    "student.attn_heads",
    "student.attn_hidden",
];

fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.get(key)? {
        *slot = v;
    }
    Ok(())
}

fn set_spec_sizes(kv: &KeyValues, prefix: &str, s: &mut ArchitectureSpec) -> Result<()> {
    let slots: [&mut usize; 6] = [
        &mut s.hidden_layers,
        &mut s.hidden_width,
        &mut s.embed_dim,
        &mut s.attn_layers,
        &mut s.attn_heads,
        &mut s.attn_hidden,
    ];
    for (key, slot) in STUDENT_KEYS.iter().zip(slots) {
        set(kv, &format!("{prefix}{key}"), slot)?;
    }
    Ok(())
}

/// Builds an experiment config from defaults plus the file's overrides.
pub fn experiment_config(kv: &KeyValues) -> Result<ExperimentConfig> {
    kv.check_known(EXPERIMENT_KEYS)?;
    let mut c = ExperimentConfig::default();
    set(kv, "seed", &mut c.seed)?;
    set(kv, "n_train_morphs", &mut c.n_train_morphs)?;
    set(kv, "n_test_morphs", &mut c.n_test_morphs)?;
    if let Some(l) = kv.get_list("n_pd_morphs")? {
        c.n_pd_morphs = l;
    }
    set(kv, "transitions_per_morph", &mut c.transitions_per_morph)?;
    set(kv, "min_limbs", &mut c.min_limbs)?;
    set(kv, "max_limbs", &mut c.max_limbs)?;
    if let Some(t) = kv.get_with("teacher_mode", "teacher mode", TeacherMode::parse)? {
        c.teacher_mode = t;
    }
    if let Some(b) = kv.get_bool("dropout")? {
        c.dropout = b;
    }
    if let Some(e) = kv.get_with("context_encoder", "context encoder", ContextEncoderKind::parse)? {
        c.context_encoder = e;
        c.student.context_encoder = e;
    }
    if let Some(b) = kv.get_bool("feature_transform")? {
        c.feature_transform = b;
    }
    set(kv, "repeats", &mut c.repeats)?;
    set(kv, "epochs", &mut c.distill.epochs)?;
    set(kv, "minibatch", &mut c.distill.minibatch)?;
    set(kv, "lr", &mut c.distill.lr)?;
    set(kv, "grad_clip", &mut c.distill.grad_clip)?;
    set(kv, "dropout_p", &mut c.distill.dropout_p)?;
    if let Some(d) = kv.get_with("dropout_site", "dropout site", DropoutSite::parse)? {
        c.distill.dropout_site = d;
    }
    set(kv, "ablation_epochs", &mut c.ablation_epochs)?;
    set(kv, "n_eval_states", &mut c.n_eval_states)?;
    if let Some(b) = kv.get_bool("record_wall_time")? {
        c.record_wall_time = b;
    }
    set(kv, "teacher_fit.n_states", &mut c.teacher_fit.n_states)?;
    set(kv, "teacher_fit.epochs", &mut c.teacher_fit.epochs)?;
    set(kv, "teacher_fit.minibatch", &mut c.teacher_fit.minibatch)?;
    set(kv, "teacher_fit.lr", &mut c.teacher_fit.lr)?;
    set_spec_sizes(kv, "student.", &mut c.student)?;
    c.validate()?;
    Ok(c)
}

const SPEC_FIELDS: [&str; 13] = [
    "kind",
    "hidden_layers",
    "hidden_width",
    "embed_dim",
    "attn_layers",
    "attn_heads",
    "attn_hidden",
    "context_encoder",
    "state_dim",
    "action_dim",
    "n_max",
    "fixed_attention",
    "feature_transform",
];

/// Reads `spec.<name>.<field> = value` rows, in the order their names
/// first appear in `text`, plus an optional `limbs`.
/// Named table rows and the optional limb count.
pub type CostSpecs = (Vec<(String, ArchitectureSpec)>, Option<usize>);

pub fn cost_specs(kv: &KeyValues, text: &str) -> Result<CostSpecs> {
    kv.check_known(&["limbs", "spec.*"])?;
    let mut names: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if let Some(rest) = line.strip_prefix("spec.") {
            if let Some((name, _)) = rest.split_once('.') {
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_string());
                }
            }
        }
    }
    for k in kv.keys().filter(|k| k.starts_with("spec.")) {
        let field = k.splitn(3, '.').nth(2).unwrap_or("");
        if !SPEC_FIELDS.contains(&field) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let p = format!("spec.{name}.");
        let kind = kv
            .get_with(&format!("{p}kind"), "architecture kind", ArchKind::parse)?
            .ok_or_else(|| Error::Config(format!("missing key `{p}kind`")))?;
        let s_dim = kv
            .get(&format!("{p}state_dim"))?
            .ok_or_else(|| Error::Config(format!("missing key `{p}state_dim`")))?;
        let a_dim = kv
            .get(&format!("{p}action_dim"))?
            .ok_or_else(|| Error::Config(format!("missing key `{p}action_dim`")))?;
        let mut s = ArchitectureSpec::new(kind, s_dim, a_dim);
        set_spec_sizes(kv, &p, &mut s)?;
        set(kv, &format!("{p}n_max"), &mut s.n_max)?;
        if let Some(e) = kv.get_with(&format!("{p}context_encoder"), "context encoder", ContextEncoderKind::parse)? {
            s.context_encoder = e;
        }
        if let Some(b) = kv.get_bool(&format!("{p}fixed_attention"))? {
            s.fixed_attention = b;
        }
        if let Some(t) = kv.get_with(&format!("{p}feature_transform"), "feature transform", parse_feature_transform)? {
            s.feature_transform = t;
        }
        s.validate().map_err(|e| Error::Config(format!("spec `{name}`: {e}")))?;
        out.push((name, s));
    }
    Ok((out, kv.get("limbs")?))
}

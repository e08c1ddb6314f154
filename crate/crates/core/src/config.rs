//! Flat `key = value` run configuration.
//!
//! Every key has a default, unknown keys are errors, and command-line
//! overrides reuse the same parser so precedence is simply "applied last
//! wins". The resolved config canonicalizes to text; the model-defining
//! subset of that text is hashed into the checkpoint fingerprint.

use std::path::{Path, PathBuf};

use crate::encoder::ChannelConfig;
use crate::error::{Error, Result};
use crate::memory::ReadWeighting;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Channels.
    pub use_emb: bool,
    pub use_rnn: bool,
    pub use_ntm: bool,
    pub read_weighting: ReadWeighting,
    pub stacked_bidir: bool,
    pub emb_bias: bool,
    pub e: usize,
    pub d: usize,
    pub m: usize,
    /// Start the decoder from zeros instead of the pooled annotation.
    pub zero_init: bool,
    /// Half-width of the uniform parameter init.
    pub init_width: f64,

    // Corpus.
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Training pairs longer than this on either side are dropped.
    pub max_len: usize,

    // Training.
    pub epochs: usize,
    pub batch: usize,
    pub dropout: f64,
    pub warmup: u64,
    pub num_gpus: u64,
    pub seed: u64,
    /// Fixed learning rate; unset means the warmup schedule.
    pub lr: Option<f64>,
    pub checkpoint_every: u64,

    // Inference and evaluation.
    pub beam: usize,
    pub lowercase: bool,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var("MCNMT_OUT").unwrap_or_else(|_| "out".to_string());
        RunConfig {
            use_emb: true,
            use_rnn: true,
            use_ntm: true,
            read_weighting: ReadWeighting::Literal,
            stacked_bidir: false,
            emb_bias: true,
            e: 512,
            d: 512,
            m: 512,
            zero_init: false,
            init_width: crate::numerics::INIT_HALF_WIDTH,
            train_src: None,
            train_tgt: None,
            test_src: None,
            test_tgt: None,
            src_vocab: 30000,
            tgt_vocab: 30000,
            max_len: 50,
            epochs: 10,
            batch: 16,
            dropout: 0.5,
            warmup: 6000,
            num_gpus: 1,
            seed: 1,
            lr: None,
            checkpoint_every: 500,
            beam: 10,
            lowercase: false,
            out_dir: PathBuf::from(out_dir),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("key `{key}` expects {kind}, got {value:?}"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}` expects true or false, got {value:?}"))),
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment. Flags and file lines both land
    /// here, so the last application of a key wins.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "use_emb" => self.use_emb = parse_bool(key, value)?,
            "use_rnn" => self.use_rnn = parse_bool(key, value)?,
            "use_ntm" => self.use_ntm = parse_bool(key, value)?,
            "read_weighting" => {
                self.read_weighting = match value {
                    "literal" => ReadWeighting::Literal,
                    "single" => ReadWeighting::Single,
                    _ => {
                        return Err(Error::Config(format!(
                            "key `read_weighting` expects literal or single, got {value:?}"
                        )))
                    }
                }
            }
            "stacked_bidir" => self.stacked_bidir = parse_bool(key, value)?,
            "emb_bias" => self.emb_bias = parse_bool(key, value)?,
            "e" => self.e = parse_as(key, value, "an integer")?,
            "d" => self.d = parse_as(key, value, "an integer")?,
            "m" => self.m = parse_as(key, value, "an integer")?,
            "zero_init" => self.zero_init = parse_bool(key, value)?,
            "init_width" => self.init_width = parse_as(key, value, "a number")?,
            "train_src" => self.train_src = parse_opt_path(value),
            "train_tgt" => self.train_tgt = parse_opt_path(value),
            "test_src" => self.test_src = parse_opt_path(value),
            "test_tgt" => self.test_tgt = parse_opt_path(value),
            "src_vocab" => self.src_vocab = parse_as(key, value, "an integer")?,
            "tgt_vocab" => self.tgt_vocab = parse_as(key, value, "an integer")?,
            "max_len" => self.max_len = parse_as(key, value, "an integer")?,
            "epochs" => self.epochs = parse_as(key, value, "an integer")?,
            "batch" => self.batch = parse_as(key, value, "an integer")?,
            "dropout" => self.dropout = parse_as(key, value, "a number")?,
            "warmup" => self.warmup = parse_as(key, value, "an integer")?,
            "num_gpus" => self.num_gpus = parse_as(key, value, "an integer")?,
            "seed" => self.seed = parse_as(key, value, "an integer")?,
            "lr" => {
                self.lr = if value.is_empty() {
                    None
                } else {
                    Some(parse_as(key, value, "a number")?)
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_as(key, value, "an integer")?,
            "beam" => self.beam = parse_as(key, value, "an integer")?,
            "lowercase" => self.lowercase = parse_bool(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse config text over the defaults. Blank lines and `#` comments
    /// are skipped; everything else must be `key = value`.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Apply command-line overrides on top of whatever the file said.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn channels(&self) -> ChannelConfig {
        ChannelConfig {
            use_emb: self.use_emb,
            use_rnn: self.use_rnn,
            use_ntm: self.use_ntm,
            read_weighting: self.read_weighting,
            stacked_bidir: self.stacked_bidir,
            emb_bias: self.emb_bias,
            e: self.e,
            d: self.d,
            m: self.m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channels().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.beam < 1 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_len < 1 || self.batch < 1 {
            return Err(Error::Config("max_len and batch must be at least 1".into()));
        }
        if self.warmup < 1 || self.num_gpus < 1 {
            return Err(Error::Config("warmup and num_gpus must be at least 1".into()));
        }
        if !(self.init_width > 0.0) {
            return Err(Error::Config(format!("init_width must be positive, got {}", self.init_width)));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config(
                "vocab sizes must be at least 5 (four ids are reserved)".into(),
            ));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("lr must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    fn path_str(p: &Option<PathBuf>) -> String {
        p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }

    /// Fixed-order `key = value` text for the fully resolved config. Parsing
    /// it back reproduces `self`.
    pub fn canonical_text(&self) -> String {
        let mut out = self.model_text();
        out.push_str(&format!(
            "train_src = {}\ntrain_tgt = {}\ntest_src = {}\ntest_tgt = {}\nmax_len = {}\n\
             epochs = {}\nbatch = {}\ndropout = {}\nwarmup = {}\nnum_gpus = {}\nseed = {}\n\
             lr = {}\ncheckpoint_every = {}\nbeam = {}\nlowercase = {}\nout_dir = {}\n",
            Self::path_str(&self.train_src),
            Self::path_str(&self.train_tgt),
            Self::path_str(&self.test_src),
            Self::path_str(&self.test_tgt),
            self.max_len,
            self.epochs,
            self.batch,
            self.dropout,
            self.warmup,
            self.num_gpus,
            self.seed,
            self.lr.map(|v| v.to_string()).unwrap_or_default(),
            self.checkpoint_every,
            self.beam,
            self.lowercase,
            self.out_dir.display(),
        ));
        out
    }

    /// The subset of keys that determines checkpoint compatibility: the
    /// architecture and the vocabulary sizes, not the training schedule or
    /// the output paths.
    pub fn model_text(&self) -> String {
        format!(
            "use_emb = {}\nuse_rnn = {}\nuse_ntm = {}\nread_weighting = {}\n\
             stacked_bidir = {}\nemb_bias = {}\ne = {}\nd = {}\nm = {}\nzero_init = {}\n\
             init_width = {}\nsrc_vocab = {}\ntgt_vocab = {}\n",
            self.use_emb,
            self.use_rnn,
            self.use_ntm,
            match self.read_weighting {
                ReadWeighting::Literal => "literal",
                ReadWeighting::Single => "single",
            },
            self.stacked_bidir,
            self.emb_bias,
            self.e,
            self.d,
            self.m,
            self.zero_init,
            self.init_width,
            self.src_vocab,
            self.tgt_vocab,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.model_text().as_bytes())
    }

    /// Write the resolved config next to the other artifacts.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.canonical_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_valid_defaults() {
        let cfg = RunConfig::parse_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.src_vocab, 30000);
        assert_eq!(cfg.max_len, 50);
        assert_eq!(cfg.beam, 10);
        assert_eq!(cfg.dropout, 0.5);
        assert_eq!(cfg.warmup, 6000);
    }

    #[test]
    fn ntm_dims_must_match() {
        let cfg = RunConfig::parse_text("use_ntm = true\ne = 32\nd = 16\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("m == e == d"), "{err}");
    }

    #[test]
    fn flag_override_beats_file_value() {
        let mut cfg = RunConfig::parse_text("beam = 10\n").unwrap();
        cfg.apply_overrides(&[("beam".to_string(), "4".to_string())]).unwrap();
        assert_eq!(cfg.beam, 4);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse_text("bea = 7\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = RunConfig::parse_text("beam = soup\n").unwrap_err();
        assert!(err.to_string().contains("beam"), "{err}");
        let err = RunConfig::parse_text("use_ntm = maybe\n").unwrap_err();
        assert!(err.to_string().contains("use_ntm"), "{err}");
        let err = RunConfig::parse_text("read_weighting = squared\n").unwrap_err();
        assert!(err.to_string().contains("read_weighting"), "{err}");
    }

    #[test]
    fn comments_blanks_and_duplicates() {
        let cfg = RunConfig::parse_text("# a comment\n\n  beam = 3 \nbeam = 5\n").unwrap();
        assert_eq!(cfg.beam, 5, "last assignment wins");
        let err = RunConfig::parse_text("beam: 5\n").unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("use_emb", "false").unwrap();
        cfg.set("e", "64").unwrap();
        cfg.set("d", "64").unwrap();
        cfg.set("m", "64").unwrap();
        cfg.set("lr", "0.05").unwrap();
        cfg.set("train_src", "data/train.src").unwrap();
        cfg.set("read_weighting", "single").unwrap();
        let parsed = RunConfig::parse_text(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn fingerprint_tracks_architecture_not_schedule() {
        let base = RunConfig::default();
        let mut wider = base.clone();
        wider.set("e", "256").unwrap();
        assert_ne!(base.fingerprint(), wider.fingerprint());

        let mut other_beam = base.clone();
        other_beam.set("beam", "2").unwrap();
        other_beam.set("epochs", "99").unwrap();
        assert_eq!(base.fingerprint(), other_beam.fingerprint());
    }

    #[test]
    fn fingerprint_ignores_source_formatting() {
        let a = RunConfig::parse_text("e = 64\nd=64\nm =64\n").unwrap();
        let b = RunConfig::parse_text("  m = 64\n\ne = 64\n# hi\nd = 64\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let mut cfg = RunConfig::default();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.beam = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.lr = Some(0.0);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.init_width = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_config_is_written_and_parseable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("beam", "7").unwrap();
        let path = cfg.save_resolved(dir.path()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_lr_clears_the_override() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.1").unwrap();
        cfg.set("lr", "").unwrap();
        assert_eq!(cfg.lr, None);
    }
}

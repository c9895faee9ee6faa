//! Plain-text settings files: one `key = value` per line, `#` starts a
//! comment. Model keys configure the forecaster, train keys the
//! optimizer, gan keys the adversarial mode. Unknown keys are errors so
//! typos cannot silently fall back to defaults.

use roadcast_core::gan::GanConfig;
use roadcast_core::model::{Ablation, HolidayMode, ModelConfig};
use roadcast_core::spatial::SpatialVariant;
use roadcast_core::train::TrainConfig;
use roadcast_core::{Error, Result};
use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default)]
pub struct Settings {
    entries: HashMap<String, (usize, String)>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            line: 0,
            detail: format!("cannot read settings file {}: {e}", path.display()),
        })?;
        Self::from_str_lines(&text)
    }

    pub fn from_str_lines(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Load {
                line: line_no,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (line_no, value)).is_some() {
                return Err(Error::Load {
                    line: line_no,
                    detail: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Settings { entries })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|_| Error::Load {
                line,
                detail: format!("cannot parse `{value}` for key `{key}`"),
            }),
        }
    }

    fn take_split(&mut self) -> Result<Option<(f64, f64, f64)>> {
        match self.entries.remove("split") {
            None => Ok(None),
            Some((line, value)) => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Load {
                        line,
                        detail: format!("cannot parse `{value}` as three fractions"),
                    })?;
                if parts.len() != 3 {
                    return Err(Error::Load {
                        line,
                        detail: format!(
                            "split needs exactly three comma-separated fractions, got {}",
                            parts.len()
                        ),
                    });
                }
                Ok(Some((parts[0], parts[1], parts[2])))
            }
        }
    }

    /// Build the forecaster configuration; `n` and `c` come from the
    /// dataset rather than the file.
    pub fn model_config(&mut self, n: usize, c: usize) -> Result<ModelConfig> {
        let p = self.take("p")?.unwrap_or(12);
        let q = self.take("q")?.unwrap_or(12);
        let d = self.take("d")?.unwrap_or(100);
        let mut cfg = ModelConfig::new(n, p, q, d, c);
        if let Some(k) = self.take("k")? {
            cfg.k = k;
        }
        if let Some(layers) = self.take("spatial_layers")? {
            cfg.spatial_layers = layers;
        }
        if let Some(v) = self.take::<SpatialVariant>("spatial_variant")? {
            cfg.spatial_variant = v;
        }
        if let Some(a) = self.take::<Ablation>("ablation")? {
            cfg.ablation = a;
        }
        if let Some(f) = self.take("fallback_zp")? {
            cfg.fallback_zp = f;
        }
        if let Some((line, value)) = self.entries.remove("holiday_mode") {
            cfg.holiday_mode = match value.as_str() {
                "as_sunday" => HolidayMode::AsSunday,
                "extra_day" => HolidayMode::ExtraDay,
                other => {
                    return Err(Error::Load {
                        line,
                        detail: format!(
                            "holiday_mode must be as_sunday or extra_day, got `{other}`"
                        ),
                    })
                }
            };
        }
        if let Some(s) = self.take("model_seed")? {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    /// Build the optimizer configuration. `force_gan` switches the
    /// adversarial mode on even when the file does not.
    pub fn train_config(&mut self, force_gan: bool) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.take("learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.take("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.take("max_epochs")? {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.take("patience")? {
            cfg.patience = v;
        }
        if let Some(v) = self.take("beta1")? {
            cfg.beta1 = v;
        }
        if let Some(v) = self.take("beta2")? {
            cfg.beta2 = v;
        }
        if let Some(v) = self.take("epsilon")? {
            cfg.epsilon = v;
        }
        if let Some(v) = self.take("train_seed")? {
            cfg.seed = v;
        }
        if let Some(v) = self.take_split()? {
            cfg.split = v;
        }
        if let Some(v) = self.take("max_batches_per_epoch")? {
            cfg.max_batches_per_epoch = Some(v);
        }

        let gan_on = self.take("gan")?.unwrap_or(false) || force_gan;
        let mut gan = GanConfig::default();
        if let Some(v) = self.take("gan_lambda")? {
            gan.lambda = v;
        }
        if let Some(v) = self.take("gen_epochs_per_disc")? {
            gan.gen_epochs_per_disc = v;
        }
        if let Some(v) = self.take("disc_seed")? {
            gan.disc_seed = v;
        }
        if gan_on {
            cfg.gan = Some(gan);
        }
        Ok(cfg)
    }

    /// Error on any key neither config consumed — typos should fail
    /// loudly, not fall back to defaults.
    pub fn ensure_consumed(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let mut leftovers: Vec<(&usize, &String)> = self
            .entries
            .iter()
            .map(|(k, (line, _))| (line, k))
            .collect();
        leftovers.sort();
        let (line, key) = leftovers[0];
        Err(Error::Load {
            line: *line,
            detail: format!("unknown settings key `{key}`"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file_round_trips_into_both_configs() {
        let text = "
            # forecaster
            p = 4
            q = 3
            d = 16
            k = 1
            spatial_layers = 2
            spatial_variant = gcn
            ablation = no_spatial
            fallback_zp = true
            holiday_mode = extra_day
            model_seed = 7

            # optimizer
            learning_rate = 0.002
            batch_size = 8
            max_epochs = 5
            patience = 2
            beta1 = 0.8
            beta2 = 0.95
            epsilon = 1e-6
            train_seed = 11
            split = 0.6, 0.2, 0.2
            max_batches_per_epoch = 3

            # adversarial
            gan = true
            gan_lambda = 0.5
            gen_epochs_per_disc = 2
            disc_seed = 13
        ";
        let mut s = Settings::from_str_lines(text).unwrap();
        let m = s.model_config(9, 1).unwrap();
        assert_eq!((m.n, m.p, m.q, m.d, m.c), (9, 4, 3, 16, 1));
        assert_eq!(m.k, 1);
        assert_eq!(m.spatial_layers, 2);
        assert_eq!(m.spatial_variant, SpatialVariant::Gcn);
        assert_eq!(m.ablation, Ablation::NoSpatial);
        assert!(m.fallback_zp);
        assert_eq!(m.holiday_mode, HolidayMode::ExtraDay);
        assert_eq!(m.seed, 7);
        let t = s.train_config(false).unwrap();
        assert_eq!(t.learning_rate, 0.002);
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.max_epochs, 5);
        assert_eq!(t.patience, 2);
        assert_eq!(t.split, (0.6, 0.2, 0.2));
        assert_eq!(t.max_batches_per_epoch, Some(3));
        let g = t.gan.unwrap();
        assert_eq!(g.lambda, 0.5);
        assert_eq!(g.gen_epochs_per_disc, 2);
        assert_eq!(g.disc_seed, 13);
        s.ensure_consumed().unwrap();
    }

    #[test]
    fn defaults_match_reference_settings() {
        let mut s = Settings::from_str_lines("").unwrap();
        let m = s.model_config(5, 1).unwrap();
        assert_eq!((m.p, m.q, m.d), (12, 12, 100));
        let t = s.train_config(false).unwrap();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.max_epochs, 20);
        assert!(t.gan.is_none());
        let t2 = Settings::from_str_lines("")
            .unwrap()
            .train_config(true)
            .unwrap();
        let g = t2.gan.unwrap();
        assert_eq!(g.lambda, 0.01);
        assert_eq!(g.gen_epochs_per_disc, 5);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut s = Settings::from_str_lines("p = 4\nnot_a_key = 1").unwrap();
        s.model_config(3, 1).unwrap();
        s.train_config(false).unwrap();
        let err = s.ensure_consumed().unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");

        assert!(Settings::from_str_lines("p 4").is_err());
        assert!(Settings::from_str_lines("p = 4\np = 5").is_err());
        let mut bad = Settings::from_str_lines("p = fast").unwrap();
        assert!(bad.model_config(3, 1).is_err());
        let mut bad = Settings::from_str_lines("split = 0.5, 0.5").unwrap();
        assert!(bad.train_config(false).is_err());
        let mut bad = Settings::from_str_lines("holiday_mode = tuesday").unwrap();
        assert!(bad.model_config(3, 1).is_err());
    }

    #[test]
    fn comments_and_inline_comments_are_ignored() {
        let mut s =
            Settings::from_str_lines("# a comment\np = 6 # window length\n\n  q = 2").unwrap();
        let m = s.model_config(3, 1).unwrap();
        assert_eq!((m.p, m.q), (6, 2));
    }
}

use crate::audio_dsp::SpectroConfig;
use crate::error::{invalid, Result};
use std::io::Write;
use std::path::Path;

pub const POSITIVE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameLabel {
    Positive,
    Negative,
    Ignore,
}

impl FrameLabel {
    /// Sidecar encoding: 1, 0 and -1.
    pub fn code(self) -> i8 {
        match self {
            FrameLabel::Positive => 1,
            FrameLabel::Negative => 0,
            FrameLabel::Ignore => -1,
        }
    }

    pub fn from_code(code: i8) -> Option<Self> {
        match code {
            1 => Some(FrameLabel::Positive),
            0 => Some(FrameLabel::Negative),
            -1 => Some(FrameLabel::Ignore),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrack {
    pub labels: Vec<FrameLabel>,
}

impl LabelTrack {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: FrameLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Writes `frame<TAB>code` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(out, "{i}\t{}", l.code())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let (Some(idx), Some(code), None) = (parts.next(), parts.next(), parts.next()) else {
                return invalid(format!("label line {} is malformed", n + 1));
            };
            let label = code.trim().parse::<i8>().ok().and_then(FrameLabel::from_code);
            match (idx.trim().parse::<usize>(), label) {
                (Ok(i), Some(l)) if i == labels.len() => labels.push(l),
                _ => return invalid(format!("label line {} is malformed", n + 1)),
            }
        }
        Ok(Self { labels })
    }
}

/// Frame labels for one clip. A keyword clip with end frame `e` gets the
/// centred window `[e - n/2, e + n - n/2 - 1]` (clipped to the clip) as
/// positives and every other frame as ignore; a clip without a keyword is
/// all negative.
pub fn label_frames(end_frame: Option<usize>, frames: usize, window: usize) -> Result<LabelTrack> {
    let Some(e) = end_frame else {
        return Ok(LabelTrack {
            labels: vec![FrameLabel::Negative; frames],
        });
    };
    if e >= frames {
        return invalid(format!("keyword end frame {e} outside a clip of {frames} frames"));
    }
    let lo = e.saturating_sub(window / 2);
    let hi = (e + window - window / 2).min(frames);
    let labels = (0..frames)
        .map(|t| {
            if (lo..hi).contains(&t) {
                FrameLabel::Positive
            } else {
                FrameLabel::Ignore
            }
        })
        .collect();
    Ok(LabelTrack { labels })
}

/// First frame whose window has seen the keyword's final sample, clamped to
/// the clip.
pub fn keyword_end_frame(end_s: f64, cfg: &SpectroConfig, frames: usize) -> usize {
    let end_sample = (end_s * cfg.sample_rate as f64).round() as i64;
    let win = cfg.win_len() as i64;
    let hop = cfg.hop_len() as i64;
    let t = (end_sample - win).max(0);
    let t = (t + hop - 1) / hop;
    (t as usize).min(frames.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centred_window_example() {
        let track = label_frames(Some(100), 120, POSITIVE_WINDOW).unwrap();
        for (t, l) in track.labels.iter().enumerate() {
            let want = if (95..=104).contains(&t) {
                FrameLabel::Positive
            } else {
                FrameLabel::Ignore
            };
            assert_eq!(*l, want, "frame {t}");
        }
    }

    #[test]
    fn end_at_last_frame_is_clipped() {
        let track = label_frames(Some(119), 120, POSITIVE_WINDOW).unwrap();
        assert_eq!(track.count(FrameLabel::Positive), 6);
        assert_eq!(track.labels[119], FrameLabel::Positive);
        assert_eq!(track.labels[114], FrameLabel::Positive);
        assert_eq!(track.labels[113], FrameLabel::Ignore);
    }

    #[test]
    fn negative_clip() {
        let track = label_frames(None, 200, POSITIVE_WINDOW).unwrap();
        assert_eq!(track.count(FrameLabel::Negative), 200);
        assert_eq!(track.count(FrameLabel::Positive), 0);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.tsv");
        let track = label_frames(Some(3), 12, POSITIVE_WINDOW).unwrap();
        track.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("0\t1\n"));
        assert_eq!(LabelTrack::load(&p).unwrap(), track);
    }

    #[test]
    fn end_frame_from_time() {
        let cfg = SpectroConfig::default();
        // 1.0 s = sample 16000; frame t ends at 160 t + 400
        assert_eq!(keyword_end_frame(1.0, &cfg, 500), 98);
        assert_eq!(keyword_end_frame(0.001, &cfg, 500), 0);
        assert_eq!(keyword_end_frame(9.0, &cfg, 50), 49);
    }

    proptest! {
        #[test]
        fn labels_are_conserved(frames in 1usize..400, e_frac in 0.0f64..1.0, window in 1usize..20) {
            let e = ((frames as f64 - 1.0) * e_frac) as usize;
            let track = label_frames(Some(e), frames, window).unwrap();
            let pos = track.count(FrameLabel::Positive);
            prop_assert_eq!(pos + track.count(FrameLabel::Negative) + track.count(FrameLabel::Ignore), frames);
            prop_assert!(pos <= window && pos >= 1);
            prop_assert_eq!(track.labels[e], FrameLabel::Positive);
        }
    }
}

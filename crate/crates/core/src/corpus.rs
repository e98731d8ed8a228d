//! Discovery and loading of WAV corpora as 5 s clips.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::{self, PartialClip, Waveform, CLIP_SAMPLES};
use crate::{CoreError, Result};

/// A 5 s clip and a stable identifier (`relative/path.wav#index`).
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub source: PathBuf,
    /// Sample offset within the source file.
    pub offset: u64,
    pub wave: Waveform,
}

/// Every `.wav` under `dir`, sorted by path.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CoreError::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| CoreError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads, resamples to 16 kHz and cuts one file into clips.
pub fn clips_of_file(path: &Path, root: &Path, policy: PartialClip) -> Result<Vec<Clip>> {
    let w = audio::resample_to_16k(&audio::load_wav(path)?)?;
    let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
    Ok(audio::frame_clips(&w, CLIP_SAMPLES, policy)?
        .into_iter()
        .enumerate()
        .map(|(i, wave)| Clip { id: format!("{rel}#{i}"), source: path.to_path_buf(), offset: (i * CLIP_SAMPLES) as u64, wave })
        .collect())
}

/// All clips of all WAV files under `dir`, in path order.
pub fn load_clips(dir: &Path, policy: PartialClip) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for path in list_wavs(dir)? {
        clips.extend(clips_of_file(&path, dir, policy)?);
    }
    if clips.is_empty() {
        return Err(CoreError::Empty(format!("no audio clips under {}", dir.display())));
    }
    Ok(clips)
}

/// SHA-256 over clip ids and sample bytes.
pub fn corpus_hash(clips: &[Clip]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.id.as_bytes());
        h.update([0u8]);
        for s in &c.wave.samples {
            h.update(s.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Example indices (into a pool of `pool`) for 1-based `step`: consecutive slices of a
/// stream of per-epoch permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, pool: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch {
        let pos = (step - 1) * batch as u64 + i as u64;
        let epoch = pos / pool as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..pool).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % pool as u64) as usize]);
    }
    out
}

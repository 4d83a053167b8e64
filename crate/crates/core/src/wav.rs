//! 16-bit mono PCM WAV helpers.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavSpec};

pub fn mono16(sample_rate: u32) -> WavSpec {
    WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int }
}

pub fn encode(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, mono16(sample_rate)).expect("in-memory wav header");
        for &s in samples {
            w.write_sample(s).expect("in-memory wav write");
        }
        w.finalize().expect("in-memory wav finalize");
    }
    cursor.into_inner()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedWav {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub samples: Vec<i16>,
}

pub fn decode_reader<R: Read>(r: R) -> Result<DecodedWav, hound::Error> {
    let mut reader = hound::WavReader::new(r)?;
    let spec = reader.spec();
    let samples = if spec.bits_per_sample == 16 && spec.sample_format == SampleFormat::Int {
        reader.samples::<i16>().collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(DecodedWav { sample_rate: spec.sample_rate, channels: spec.channels, bits_per_sample: spec.bits_per_sample, samples })
}

pub fn decode(bytes: &[u8]) -> Result<DecodedWav, hound::Error> {
    decode_reader(Cursor::new(bytes))
}

pub fn duration_secs(path: &Path) -> Result<f64, hound::Error> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Reads `len` samples starting at `offset` from a 16-bit mono file.
pub fn read_range<R: Read + Seek>(r: R, offset: u64, len: usize) -> Result<Vec<i16>, hound::Error> {
    let mut reader = hound::WavReader::new(r)?;
    reader.seek(offset as u32)?;
    reader.samples::<i16>().take(len).collect()
}

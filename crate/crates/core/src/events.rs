//! Event streams, the `EVT1` file format, and multi-density event stacks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use evstereo_tensor::{Conv2dParams, Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Init};

pub const EVT_MAGIC: &[u8; 4] = b"EVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    /// +1 or -1.
    pub p: i8,
}

/// A sensor-sized event stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
                return Err(Error::EventFormat(format!(
                    "event {i} at ({}, {}) outside {}x{}",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::EventFormat(format!(
                    "event {i} has polarity {}",
                    e.p
                )));
            }
            if e.t < last {
                return Err(Error::EventFormat(format!(
                    "event {i} timestamp {} goes backwards",
                    e.t
                )));
            }
            last = e.t;
        }
        Ok(())
    }

    pub fn write_evt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(EVT_MAGIC)?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&(self.events.len() as u64).to_le_bytes())?;
        for e in &self.events {
            w.write_all(&e.x.to_le_bytes())?;
            w.write_all(&e.y.to_le_bytes())?;
            w.write_all(&e.p.to_le_bytes())?;
            w.write_all(&[0u8])?;
            w.write_all(&e.t.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_evt<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::EventFormat("truncated header".into()),
            _ => e.into(),
        })?;
        if &header[..4] != EVT_MAGIC {
            return Err(Error::EventFormat(format!("bad magic {:?}", &header[..4])));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if count.checked_mul(14) != Some(raw.len() as u64) {
            return Err(Error::EventFormat(format!(
                "header announces {count} events, body holds {} bytes",
                raw.len()
            )));
        }
        let events = raw
            .chunks_exact(14)
            .map(|c| Event {
                x: u16::from_le_bytes([c[0], c[1]]),
                y: u16::from_le_bytes([c[2], c[3]]),
                p: c[4] as i8,
                t: u64::from_le_bytes(c[6..14].try_into().unwrap()),
            })
            .collect();
        let stream = Self {
            width,
            height,
            events,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_evt(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_evt(BufReader::new(File::open(path)?))
    }

    /// Read a `x,y,t,p` CSV with a header line. The sensor size is given by
    /// the caller since CSV fixtures carry none.
    pub fn read_csv<R: Read>(r: R, width: u32, height: u32) -> Result<Self> {
        let mut events = Vec::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if n == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::EventFormat(format!(
                    "line {}: expected 4 fields, got {}",
                    n + 1,
                    f.len()
                )));
            }
            let bad = |what: &str| Error::EventFormat(format!("line {}: bad {what}", n + 1));
            events.push(Event {
                x: f[0].parse().map_err(|_| bad("x"))?,
                y: f[1].parse().map_err(|_| bad("y"))?,
                t: f[2].parse().map_err(|_| bad("t"))?,
                p: f[3].parse().map_err(|_| bad("p"))?,
            });
        }
        let stream = Self {
            width,
            height,
            events,
        };
        stream.validate()?;
        Ok(stream)
    }
}

/// Events with `t_min <= t < t_max`, order preserved.
pub fn filter_window(events: &[Event], t_min: u64, t_max: u64) -> Vec<Event> {
    debug_assert!(t_min <= t_max);
    events
        .iter()
        .filter(|e| e.t >= t_min && e.t < t_max)
        .copied()
        .collect()
}

/// Replay the last `min(n, len)` events into a zero grid; each event
/// overwrites its pixel with its polarity. Returns `[1, H, W]`.
pub fn stack_by_number(events: &[Event], n: usize, width: usize, height: usize) -> Tensor {
    let mut grid = vec![0.0; width * height];
    let start = events.len().saturating_sub(n);
    for e in &events[start..] {
        let (x, y) = (e.x as usize, e.y as usize);
        if x < width && y < height {
            grid[y * width + x] = f64::from(e.p);
        }
    }
    Tensor::new([1, height, width], grid).expect("grid size")
}

/// Multi-density event representation: scale `m` holds the most recent
/// `N / 2^m` events.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStack {
    /// `[M, H, W]`.
    pub grid: Tensor,
    pub window_length: usize,
    /// Events actually used per scale.
    pub densities: Vec<usize>,
}

pub fn density_schedule(n: usize, scales: usize) -> Result<Vec<usize>> {
    if scales == 0 {
        return invalid("need at least one density scale");
    }
    if scales > 63 || n < (1usize << (scales - 1)) {
        return invalid(format!(
            "window of {n} events is too small for {scales} scales (needs >= {})",
            1u64 << (scales - 1).min(63)
        ));
    }
    Ok((0..scales).map(|m| n >> m).collect())
}

pub fn build_multi_density(
    events: &[Event],
    n: usize,
    scales: usize,
    width: usize,
    height: usize,
) -> Result<EventStack> {
    let schedule = density_schedule(n, scales)?;
    let mut data = Vec::with_capacity(scales * width * height);
    let mut densities = Vec::with_capacity(scales);
    for &count in &schedule {
        data.extend_from_slice(stack_by_number(events, count, width, height).data());
        densities.push(count.min(events.len()));
    }
    Ok(EventStack {
        grid: Tensor::new([scales, height, width], data)?,
        window_length: n,
        densities,
    })
}

/// Learnable 1x1 convolution + SiLU mapping `M` stack channels to `C0`.
#[derive(Clone, Debug)]
pub struct Concentrator {
    pub conv: Conv2d,
}

impl Concentrator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scales: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                scales,
                channels,
                1,
                Conv2dParams::default(),
                true,
                Init::Kaiming,
                rng,
            ),
        }
    }

    /// `stacks` is `[B, M, H, W]`.
    pub fn forward(&self, g: &mut Graph, stacks: Var) -> Result<Var> {
        let y = self.conv.forward(g, stacks)?;
        Ok(g.tape.silu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u16, y: u16, t: u64, p: i8) -> Event {
        Event { x, y, t, p }
    }

    #[test]
    fn empty_inputs() {
        assert!(filter_window(&[], 0, 10).is_empty());
        let g = stack_by_number(&[], 4, 5, 3);
        assert_eq!(g.shape(), &[1, 3, 5]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_event_lands_at_row_col() {
        let g = stack_by_number(&[ev(2, 3, 0, 1)], 1, 5, 5);
        for (i, &v) in g.data().iter().enumerate() {
            assert_eq!(v, if i == 3 * 5 + 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn later_event_wins() {
        let g = stack_by_number(&[ev(1, 1, 0, -1), ev(1, 1, 5, 1)], 8, 3, 3);
        assert_eq!(g.data()[4], 1.0);
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(density_schedule(8, 3).unwrap(), vec![8, 4, 2]);
        assert!(density_schedule(3, 3).is_err());
        assert_eq!(density_schedule(4, 3).unwrap(), vec![4, 2, 1]);
    }

    #[test]
    fn single_scale_matches_stack_by_number() {
        let events: Vec<Event> = (0..20)
            .map(|i| ev(i % 4, i / 4 % 4, i as u64, if i % 3 == 0 { 1 } else { -1 }))
            .collect();
        let s = build_multi_density(&events, 6, 1, 4, 4).unwrap();
        assert_eq!(s.grid.data(), stack_by_number(&events, 6, 4, 4).data());
        assert_eq!(s.densities, vec![6]);
    }

    #[test]
    fn short_stream_truncates_gracefully() {
        let events = vec![ev(0, 0, 0, 1), ev(1, 0, 1, -1)];
        let s = build_multi_density(&events, 16, 3, 2, 1).unwrap();
        assert_eq!(s.densities, vec![2, 2, 2]);
        assert_eq!(s.grid.shape(), &[3, 1, 2]);
    }

    #[test]
    fn evt_header_and_validation() {
        let stream = EventStream {
            width: 4,
            height: 2,
            events: vec![ev(3, 1, 10, -1)],
        };
        let mut buf = Vec::new();
        stream.write_evt(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EVT1");
        assert_eq!(buf.len(), 20 + 14);
        assert_eq!(EventStream::read_evt(&buf[..]).unwrap(), stream);
        let bad = EventStream {
            width: 2,
            height: 2,
            events: vec![ev(3, 1, 10, -1)],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_reader() {
        let text = "x,y,t,p\n1,0,5,1\n0,1,7,-1\n";
        let s = EventStream::read_csv(text.as_bytes(), 2, 2).unwrap();
        assert_eq!(s.events, vec![ev(1, 0, 5, 1), ev(0, 1, 7, -1)]);
        assert!(EventStream::read_csv("x,y,t,p\n1,0,5\n".as_bytes(), 2, 2).is_err());
        assert!(EventStream::read_csv("x,y,t,p\n1,0,5,0\n".as_bytes(), 2, 2).is_err());
    }
}

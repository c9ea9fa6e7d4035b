//! Columnar binary container for event samples.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"EVCB"
//! version u32 = 1
//! width   u16, height u16
//! t_start f64, t_end f64
//! count   u64
//! x[]     count * u16
//! y[]     count * u16
//! pol[]   count * i8
//! ts[]    count * f64
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::{Event, EventStream};

const MAGIC: &[u8; 4] = b"EVCB";
const VERSION: u32 = 1;

pub fn write_stream<W: Write>(w: &mut W, stream: &EventStream) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u16::<LittleEndian>(stream.width)?;
    w.write_u16::<LittleEndian>(stream.height)?;
    w.write_f64::<LittleEndian>(stream.t_start)?;
    w.write_f64::<LittleEndian>(stream.t_end)?;
    w.write_u64::<LittleEndian>(stream.len() as u64)?;
    for e in stream.events() {
        w.write_u16::<LittleEndian>(e.x)?;
    }
    for e in stream.events() {
        w.write_u16::<LittleEndian>(e.y)?;
    }
    for e in stream.events() {
        w.write_i8(e.polarity)?;
    }
    for e in stream.events() {
        w.write_f64::<LittleEndian>(e.t)?;
    }
    Ok(())
}

pub fn read_stream<R: Read>(r: &mut R) -> Result<EventStream> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad event container magic".to_string()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported event container version {version}"
        )));
    }
    let width = r.read_u16::<LittleEndian>()?;
    let height = r.read_u16::<LittleEndian>()?;
    let t_start = r.read_f64::<LittleEndian>()?;
    let t_end = r.read_f64::<LittleEndian>()?;
    let count = r.read_u64::<LittleEndian>()? as usize;

    let mut xs = vec![0u16; count];
    r.read_u16_into::<LittleEndian>(&mut xs)?;
    let mut ys = vec![0u16; count];
    r.read_u16_into::<LittleEndian>(&mut ys)?;
    let mut ps = vec![0i8; count];
    r.read_i8_into(&mut ps)?;
    let mut ts = vec![0f64; count];
    r.read_f64_into::<LittleEndian>(&mut ts)?;

    let events: Vec<Event> = (0..count)
        .map(|i| Event {
            x: xs[i],
            y: ys[i],
            polarity: ps[i],
            t: ts[i],
        })
        .collect();
    EventStream::new(events, t_start, t_end, width, height)
        .map_err(|e| Error::format(format!("invalid event container payload: {e}")))
}

pub fn save_stream(path: &std::path::Path, stream: &EventStream) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_stream(&mut f, stream)
}

pub fn load_stream(path: &std::path::Path) -> Result<EventStream> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_stream(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let events = vec![
            Event {
                x: 3,
                y: 1,
                polarity: 1,
                t: 0.125,
            },
            Event {
                x: 0,
                y: 7,
                polarity: -1,
                t: 0.5,
            },
        ];
        let s = EventStream::new(events, 0.0, 1.0, 8, 8).unwrap();
        let mut buf = Vec::new();
        write_stream(&mut buf, &s).unwrap();
        let back = read_stream(&mut buf.as_slice()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_garbage() {
        let buf = b"NOPE00000000".to_vec();
        assert!(read_stream(&mut buf.as_slice()).is_err());
    }
}

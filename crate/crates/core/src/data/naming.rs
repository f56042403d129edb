//! `<id>_C<camera>_<frame>.<ext>` image names, e.g. `0001_C03_000012.jpg`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageName {
    /// `-1` marks a distractor.
    pub identity: i64,
    pub camera: u32,
    pub frame: u32,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn digits(bytes: &[u8], start: usize, what: &str) -> Result<(u64, usize)> {
    let end = start + bytes[start..].iter().take_while(|b| b.is_ascii_digit()).count();
    if end == start {
        return Err(parse_err(start, format!("expected digits for {what}")));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value = text
        .parse::<u64>()
        .map_err(|_| parse_err(start, format!("{what} out of range")))?;
    Ok((value, end))
}

fn expect(bytes: &[u8], at: usize, lit: &[u8]) -> Result<usize> {
    if bytes[at..].starts_with(lit) {
        Ok(at + lit.len())
    } else {
        Err(parse_err(
            at,
            format!("expected {:?}", std::str::from_utf8(lit).expect("ascii literal")),
        ))
    }
}

/// Parses a bare file name. The extension is required but ignored; a
/// leading `-1` identity is accepted for distractors.
pub fn parse_image_name(name: &str) -> Result<ImageName> {
    let b = name.as_bytes();
    let (identity, at) = if b.starts_with(b"-1_") {
        (-1, 2)
    } else {
        let (v, at) = digits(b, 0, "identity")?;
        let v = i64::try_from(v).map_err(|_| parse_err(0, "identity out of range"))?;
        (v, at)
    };
    let at = expect(b, at, b"_C")?;
    let (camera, at) = digits(b, at, "camera")?;
    let at = expect(b, at, b"_")?;
    let (frame, at) = digits(b, at, "frame")?;
    let at = expect(b, at, b".")?;
    if at == b.len() {
        return Err(parse_err(at, "missing extension"));
    }
    let camera = u32::try_from(camera).map_err(|_| parse_err(0, "camera out of range"))?;
    let frame = u32::try_from(frame).map_err(|_| parse_err(0, "frame out of range"))?;
    Ok(ImageName {
        identity,
        camera,
        frame,
    })
}

/// Zero-padded name: 4-digit identity, 2-digit camera, 6-digit frame.
pub fn format_image_name(name: &ImageName, ext: &str) -> String {
    let id = if name.identity < 0 {
        "-1".to_string()
    } else {
        format!("{:04}", name.identity)
    };
    format!("{id}_C{:02}_{:06}.{ext}", name.camera, name.frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let n = parse_image_name("0001_C03_000012.jpg").unwrap();
        assert_eq!((n.identity, n.camera, n.frame), (1, 3, 12));
        let n = parse_image_name("0000_C00_000000.jpg").unwrap();
        assert_eq!((n.identity, n.camera, n.frame), (0, 0, 0));
        assert_eq!(parse_image_name("-1_C02_000007.rten").unwrap().identity, -1);
    }

    #[test]
    fn malformed_names_report_offsets() {
        let offset = |s: &str| match parse_image_name(s) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(offset("person1.jpg"), 0);
        assert_eq!(offset("0001_X03_000012.jpg"), 4);
        assert_eq!(offset("0001_C03_000012"), 15);
        assert_eq!(offset("0001_C03_000012."), 16);
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(id in -1i64..100_000, cam in 0u32..1000, frame in 0u32..10_000_000) {
            let n = ImageName { identity: id, camera: cam, frame };
            prop_assert_eq!(parse_image_name(&format_image_name(&n, "jpg")).unwrap(), n);
        }
    }
}

use super::*;
use spot_testkit::pe as refpe;
use spot_testkit::PeBuilder;

fn one_section_32() -> Vec<u8> {
    PeBuilder::new32().text(&[0x31, 0xC0, 0xC3]).entry(0).build().0
}

#[test]
fn parse_minimal_pe32() {
    let bytes = one_section_32();
    let img = PeImage::parse(&bytes).unwrap();
    assert_eq!(img.arch, Arch::Pe32);
    assert_eq!(img.sections.len(), 1);
    assert_eq!(img.sections[0].name_str(), ".text");
    assert_eq!(img.opt.image_base, 0x40_0000);
    assert_eq!(img.opt.address_of_entry_point, 0x1000);
}

#[test]
fn parse_minimal_pe64() {
    let (bytes, _) = PeBuilder::new64().text(&[0xC3]).entry(0).build();
    let img = PeImage::parse(&bytes).unwrap();
    assert_eq!(img.arch, Arch::Pe64);
    assert_eq!(img.opt.image_base, 0x1_4000_0000);
}

#[test]
fn detect_arch_matches_parse() {
    let bytes = one_section_32();
    assert_eq!(detect_arch(&bytes).unwrap(), Arch::Pe32);
    let (b64, _) = PeBuilder::new64().text(&[0xC3]).build();
    assert_eq!(detect_arch(&b64).unwrap(), Arch::Pe64);
}

#[test]
fn detect_arch_truncated() {
    assert!(matches!(detect_arch(&[0x4D, 0x5A, 0, 0, 0, 0, 0, 0, 0, 0]), Err(PeError::MalformedHeader(_))));
}

#[test]
fn round_trip_byte_exact() {
    let fixtures = [
        one_section_32(),
        PeBuilder::new64().text(&[0xC3]).data(&[1, 2, 3]).build().0,
        PeBuilder::new32()
            .text(&[0xB8, 0x00, 0x30, 0x40, 0x00, 0xC3])
            .reloc(0x1001)
            .imports("kernel32.dll", &["HeapAlloc", "HeapFree"])
            .export("do_parse", 0)
            .overlay(b"trailing bytes")
            .dos_extra(&[0xAA; 0x30])
            .build()
            .0,
        PeBuilder::new64().text(&[0xC3]).tls(&[0; 16], &[0]).build().0,
    ];
    for f in fixtures {
        let img = PeImage::parse(&f).unwrap();
        assert_eq!(img.serialize(), f, "round-trip mismatch");
    }
}

#[test]
fn add_section_appends_aligned() {
    let bytes = one_section_32();
    let mut img = PeImage::parse(&bytes).unwrap();
    let before_end = img.sections[0].virtual_end();
    img.add_section(".spot0", 0x1000, SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_CNT_CODE).unwrap();
    assert_eq!(img.sections.len(), 2);
    let s = &img.sections[1];
    assert_eq!(s.virtual_address, align_up(before_end, img.opt.section_alignment));
    assert_eq!(img.opt.size_of_image, align_up(s.virtual_address + 0x1000, 0x1000));

    // mutated model survives a serialize/parse cycle
    let out = img.serialize();
    let back = PeImage::parse(&out).unwrap();
    assert_eq!(back.sections.len(), 2);
    assert_eq!(back.sections[1].name_str(), ".spot0");
    assert_eq!(back.sections[1].virtual_address, s.virtual_address);
}

#[test]
fn add_section_name_too_long() {
    let mut img = PeImage::parse(&one_section_32()).unwrap();
    assert!(matches!(img.add_section(".toolongname", 0x10, SCN_MEM_READ), Err(PeError::NameTooLong)));
}

#[test]
fn add_two_sections_strictly_increasing() {
    let mut img = PeImage::parse(&one_section_32()).unwrap();
    img.add_section(".a", 0x20, SCN_MEM_READ).unwrap();
    img.add_section(".b", 0x20, SCN_MEM_READ).unwrap();
    let vas: Vec<u32> = img.sections.iter().map(|s| s.virtual_address).collect();
    assert!(vas.windows(2).all(|w| w[0] < w[1]));
    PeImage::parse(&img.serialize()).unwrap();
}

#[test]
fn checksum_zero_body() {
    // all-zero 0x200-byte body, checksum field treated as zero
    assert_eq!(checksum(&[0u8; 0x200], 0x58), 0x200);
}

#[test]
fn checksum_matches_reference_and_is_stable() {
    let (bytes, _) = PeBuilder::new32().text(&[0x90; 64]).zero_checksum().build();
    let mut img = PeImage::parse(&bytes).unwrap();
    let first = img.update_checksum();
    assert_eq!(first, refpe::checksum_of(&img.serialize()));
    let second = img.update_checksum();
    assert_eq!(first, second);
    assert!(img.verify_checksum());

    // flipping a payload byte changes the value
    let mut flipped = img.clone();
    let off = flipped.sections[0].data.len() - 1;
    flipped.sections[0].data[off] ^= 0xFF;
    assert_ne!(flipped.update_checksum(), first);
}

#[test]
fn relocations_decoded() {
    let (bytes, layout) = PeBuilder::new32()
        .text(&[0xB8, 0, 0x30, 0x40, 0, 0xC3])
        .relocs(&[0x1001])
        .build();
    let img = PeImage::parse(&bytes).unwrap();
    let table = img.relocations().unwrap();
    assert_eq!(table.entries.len(), 1);
    assert_eq!(table.entries[0].rva, 0x1001);
    assert_eq!(table.entries[0].kind, RelocKind::HighLow);
    assert_eq!(layout.relocs.len(), 1);
}

#[test]
fn imports_and_exports_read_back() {
    let (bytes, layout) = PeBuilder::new32()
        .text(&[0xC3, 0x90, 0xC3])
        .imports("msvcrt.dll", &["memcpy", "free"])
        .export("parse_hdr", 0)
        .export("init", 2)
        .build();
    let img = PeImage::parse(&bytes).unwrap();
    let imports = img.imports();
    assert_eq!(imports.len(), 2);
    for (rva, name) in &imports {
        assert!(layout.iat.iter().any(|(r, n)| *r as u64 == *rva && n == name));
    }
    let mut exports = img.exports();
    exports.sort();
    assert_eq!(exports, vec![("init".into(), 0x1002), ("parse_hdr".into(), 0x1000)]);
}

#[test]
fn malformed_inputs_rejected() {
    assert!(PeImage::parse(b"MZ").is_err());
    let mut bytes = one_section_32();
    // corrupt a section raw size past the end of file
    let img = PeImage::parse(&bytes).unwrap();
    let table_off = img.dos_stub.len() + 24 + img.file_header.size_of_optional_header as usize;
    bytes[table_off + 16] = 0xFF; // raw_size low byte
    bytes[table_off + 18] = 0xFF;
    assert!(matches!(PeImage::parse(&bytes), Err(PeError::SectionOutOfBounds { .. }) | Err(PeError::MalformedHeader(_))));
}

#[test]
fn overlapping_sections_rejected() {
    let mut bytes = one_section_32();
    let img = PeImage::parse(&bytes).unwrap();
    let table_off = img.dos_stub.len() + 24 + img.file_header.size_of_optional_header as usize;
    // duplicate the section header with the same va
    let hdr: Vec<u8> = bytes[table_off..table_off + 40].to_vec();
    bytes[table_off + 40..table_off + 80].copy_from_slice(&hdr);
    let nsec_off = img.dos_stub.len() + 4 + 2;
    bytes[nsec_off] = 2;
    assert!(PeImage::parse(&bytes).is_err());
}

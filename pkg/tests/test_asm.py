import pytest

from faultfence.asm import (
    DanglingBranch,
    DuplicateLabel,
    ImmediateOverflow,
    ProgramImage,
    UndefinedLabel,
    UnknownMnemonic,
    assemble,
    disassemble,
    image_from_bytes,
    image_to_bytes,
    load_program,
    parse,
    write_image,
)
from faultfence.isa import Instruction, Op, decode, encode


def test_nop_halt():
    img = assemble("NOP\nHALT 1")
    assert img.size == 2
    assert decode(img.code[1]) == Instruction(Op.HALT, imm=1)


def test_branch_to_next_has_zero_displacement():
    img = assemble("CMP r0, r1\nBEQ next\nnext: HALT 0")
    assert decode(img.code[1]) == Instruction(Op.BEQ, imm=0)


def test_labels_comments_and_sp():
    img = assemble("""
start:  MOVI r1, 0x10   ; comment
        PUSH r1
        POP r2
        LD r3, [sp+0]
        JMP start
""")
    assert decode(img.code[0]) == Instruction(Op.MOVI, rd=1, imm=16)
    assert decode(img.code[3]) == Instruction(Op.LD, rd=3, rs=15, imm=0)
    assert decode(img.code[4]) == Instruction(Op.JMP, imm=-5)


def test_data_section_and_symbols():
    img = assemble("MOVI r1, val\nLD r2, [r1+0]\nHALT 0\n.org 0x7000\nval: .word 0xCAFEBABE")
    assert img.data_init == {0x7000: 0xCAFEBABE}
    assert img.symbols["val"] == 0x7000
    assert decode(img.code[0]).imm == 0x7000


def test_errors():
    with pytest.raises(UnknownMnemonic):
        assemble("FOO r1")
    with pytest.raises(UndefinedLabel):
        assemble("JMP nowhere")
    with pytest.raises(DuplicateLabel):
        assemble("a: NOP\na: NOP")
    with pytest.raises(ImmediateOverflow):
        assemble("MOVI r1, 0x10000")


def test_disassemble_simple():
    asm = disassemble(assemble("NOP\nHALT 1"))
    assert [ln.stmt.op for ln in asm.lines if ln.stmt] == ["NOP", "HALT"]


def test_disassemble_emits_branch_label():
    img = ProgramImage([encode(Instruction(Op.BEQ, imm=1)),
                        encode(Instruction(Op.NOP)),
                        encode(Instruction(Op.HALT, imm=0))])
    asm = disassemble(img)
    assert "L_0002" in asm.labels()
    assert "BEQ L_0002" in asm.text()


def test_disassemble_rejects_dangling_branch():
    img = ProgramImage([encode(Instruction(Op.JMP, imm=5))])
    with pytest.raises(DanglingBranch):
        disassemble(img)


def test_invalid_words_survive_round_trip():
    img = ProgramImage([0xFF000000, encode(Instruction(Op.HALT, imm=0))])
    assert assemble(disassemble(img).text()).code == img.code


@pytest.mark.parametrize("name", ["pincheck", "bootloader"])
def test_corpus_round_trip(name, request):
    img = request.getfixturevalue({"pincheck": "pin_image", "bootloader": "boot_image"}[name])
    text = disassemble(img).text()
    again = assemble(text)
    assert again.same_words(img)
    assert disassemble(again).text() == text


def test_parse_keeps_source_lines():
    unit = parse("a: MOVI r1, 2\n   HALT 0")
    assert unit.labels() == ["a"]
    assert unit.lines[-1].lineno == 2


def test_image_bytes_round_trip(pin_image, tmp_path):
    blob = image_to_bytes(pin_image)
    assert image_from_bytes(blob) == pin_image
    write_image(pin_image, tmp_path / "p.fi32")
    assert load_program(tmp_path / "p.fi32") == pin_image
    (tmp_path / "p.s").write_text(disassemble(pin_image).text())
    assert load_program(tmp_path / "p.s").same_words(pin_image)


def test_bad_magic():
    with pytest.raises(ValueError):
        image_from_bytes(b"XXXX" + bytes(20))

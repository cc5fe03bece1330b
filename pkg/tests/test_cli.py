"""Tests for the mixexpo command line."""

import hashlib

import pytest
from pytest_httpx import HTTPXMock

from mixexpo.cli import main
from mixexpo.data import save_png
from mixexpo.training import save_checkpoint

from tests.fixtures.images import smooth_image

QUIET = ['--log-level', 'WARNING', '--quiet']
TINY = [
    '--set', 'model.num_blocks=2',
    '--set', 'model.base_channels=8',
    '--set', 'model.attn_heads=2',
]  # fmt: skip


def write_images(directory, seeds, size=16):
    for seed in seeds:
        save_png(smooth_image(seed, size=size)[0], directory / f'img{seed}.png')


@pytest.mark.unit
def test_summary_default_model(capsys):
    """Test the default network's parameter total is printed."""
    assert main(['summary', *QUIET]) == 0
    out = capsys.readouterr().out
    assert 'total' in out
    assert '662,024' in out


@pytest.mark.unit
def test_summary_with_override(capsys):
    """Test --set reaches the model config."""
    assert main(['summary', *QUIET, '--set', 'model.num_blocks=2']) == 0
    assert '662,024' not in capsys.readouterr().out


@pytest.mark.unit
def test_usage_errors_exit_2(tmp_path):
    """Test unknown flags and missing paths are usage errors."""
    with pytest.raises(SystemExit) as exc_info:
        main(['summary', '--bogus'])
    assert exc_info.value.code == 2
    with pytest.raises(SystemExit) as exc_info:
        main(['eval', *QUIET, str(tmp_path / 'nope'), str(tmp_path), str(tmp_path / 'out')])
    assert exc_info.value.code == 2


@pytest.mark.unit
def test_library_errors_exit_1(tmp_path, capsys):
    """Test configuration errors print one line and exit 1."""
    code = main(
        ['train', *QUIET, '--set', 'weights.ecr=0', '--set', f'output_dir={tmp_path / "run"}']
    )
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith('error:')


@pytest.mark.unit
def test_bad_override_exits_1(capsys):
    """Test an invalid config value is reported, not raised."""
    assert main(['summary', *QUIET, '--set', 'model.attn_heads=5']) == 1
    assert capsys.readouterr().err.startswith('error:')


@pytest.mark.integration
def test_synth_writes_dataset(tmp_path, capsys):
    """Test synth writes the requested number of pairs."""
    assert main(['synth', *QUIET, str(tmp_path / 'data'), '--count', '2', '--size', '24']) == 0
    assert sorted(p.name for p in (tmp_path / 'data' / 'input').iterdir()) == [
        '0000.png',
        '0001.png',
    ]
    assert 'wrote 2 pairs' in capsys.readouterr().out


@pytest.mark.integration
def test_infer_directory(tmp_path, tiny_net):
    """Test every input image gets a same-named corrected output."""
    checkpoint = save_checkpoint(tmp_path / 'ckpt.pt', tiny_net)
    write_images(tmp_path / 'in', range(3))
    code = main(['infer', *QUIET, str(checkpoint), str(tmp_path / 'in'), str(tmp_path / 'out')])
    assert code == 0
    assert sorted(p.name for p in (tmp_path / 'out').iterdir()) == [
        'img0.png',
        'img1.png',
        'img2.png',
    ]


@pytest.mark.integration
def test_infer_single_file_with_masks(tmp_path, tiny_net):
    """Test single-image inference and the mask grid next to it."""
    checkpoint = save_checkpoint(tmp_path / 'ckpt.pt', tiny_net)
    write_images(tmp_path, [0])
    code = main(
        [
            'infer',
            *QUIET,
            str(checkpoint),
            str(tmp_path / 'img0.png'),
            str(tmp_path / 'fixed.png'),
            '--masks',
        ]
    )
    assert code == 0
    assert (tmp_path / 'fixed.png').exists()
    assert (tmp_path / 'fixed_masks.png').exists()


@pytest.mark.integration
def test_eval_identical_dirs(tmp_path, capsys):
    """Test predictions equal to the ground truth score perfectly."""
    write_images(tmp_path / 'gt', range(2))
    out = tmp_path / 'eval'
    code = main(
        ['eval', *QUIET, str(tmp_path / 'gt'), str(tmp_path / 'gt'), str(out), '--workers', '2']
    )
    assert code == 0
    printed = capsys.readouterr().out
    assert 'mean_psnr: 100.0000' in printed
    assert 'mean_ssim: 1.000000' in printed
    for name in ('report.csv', 'summary.txt', 'curve.csv', 'curve.png'):
        assert (out / name).exists(), name
    assert not (out / 'curve_input.csv').exists()
    assert (out / 'curve.csv').read_text().startswith('bin,lo,hi,count')


@pytest.mark.integration
def test_eval_writes_input_curve(tmp_path):
    """Test --input-dir adds the input curve next to the prediction curve."""
    write_images(tmp_path / 'gt', range(2))
    write_images(tmp_path / 'pred', range(2))
    write_images(tmp_path / 'in', range(2))
    out = tmp_path / 'eval'
    args = [str(tmp_path / 'pred'), str(tmp_path / 'gt'), str(out)]
    assert main(['eval', *QUIET, *args, '--input-dir', str(tmp_path / 'in')]) == 0
    assert (out / 'curve.csv').exists()
    assert (out / 'curve_input.csv').exists()


@pytest.mark.integration
def test_eval_unreadable_image(tmp_path, capsys):
    """Test a corrupt image ends the command with a one-line error."""
    for folder in ('pred', 'gt'):
        (tmp_path / folder).mkdir()
        (tmp_path / folder / 'a.png').write_bytes(b'not a png')
    code = main(
        ['eval', *QUIET, str(tmp_path / 'pred'), str(tmp_path / 'gt'), str(tmp_path / 'out')]
    )
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith('error: Cannot read image')


@pytest.mark.integration
def test_synth_then_train(tmp_path, capsys):
    """Test a short training run on a freshly synthesized dataset."""
    main(['synth', *QUIET, str(tmp_path / 'data'), '--count', '3', '--size', '32'])
    run = tmp_path / 'run'
    settings = {
        'train_input_dir': tmp_path / 'data' / 'input',
        'train_gt_dir': tmp_path / 'data' / 'gt',
        'weights.ecr': 0,
        'max_steps': 2,
        'batch': 2,
        'crop': 16,
        'checkpoint_every': 0,
        'validate_every': 0,
        'output_dir': run,
    }
    overrides = [arg for key, value in settings.items() for arg in ('--set', f'{key}={value}')]
    assert main(['train', *QUIET, *TINY, *overrides]) == 0
    assert 'steps: 2' in capsys.readouterr().out
    assert (run / 'last.pt').exists()
    assert (run / 'config.txt').exists()
    assert (run / 'train_log.csv').exists()


@pytest.mark.integration
def test_sanity_exit_codes(tmp_path):
    """Test the harness exits 0 when thresholds are met and 1 otherwise."""
    common = [
        *QUIET,
        *TINY,
        '--set', 'weights.ecr=0',
        '--set', 'identity_pairs=true',
        '--set', 'num_pairs=2',
        '--set', 'size=16',
        '--set', 'max_steps=0',
        '--set', f'output_dir={tmp_path / "sanity"}',
    ]  # fmt: skip
    lenient = ['--set', 'psnr_threshold=20', '--set', 'mask_error_threshold=0.6']
    assert main(['sanity', *common, *lenient]) == 0
    assert (tmp_path / 'sanity' / 'trace.csv').exists()
    assert (tmp_path / 'sanity' / 'summary.txt').exists()
    # an untrained mask sits near 0.5, far from the default threshold
    assert main(['sanity', *common]) == 1


@pytest.mark.integration
def test_fetch_weights(tmp_path, httpx_mock: HTTPXMock, capsys):
    """Test the download command without hash verification."""
    content = b'weights' * 64
    httpx_mock.add_response(url='https://weights.example.com/vgg16.pth', content=content)
    dest = tmp_path / 'vgg16.pth'
    code = main(
        [
            'fetch-weights',
            *QUIET,
            str(dest),
            '--url',
            'https://weights.example.com/vgg16.pth',
            '--no-verify',
        ]
    )
    assert code == 0
    assert dest.read_bytes() == content
    assert hashlib.sha256(content).hexdigest() in capsys.readouterr().out

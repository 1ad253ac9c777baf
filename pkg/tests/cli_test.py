import json
import os
import shutil
import pytest
import yaml
from stylemlm.run_stylemlm import main
from stylemlm.pipeline import RunManifest, run_lock, MANIFEST, LOCK
from stylemlm._utils import sha256_path, read_jsonl
from tests.conftest import TOY_SPEC
import logging
logger = logging.getLogger('stylemlm')
logger.setLevel(logging.INFO)

TINY_RUN = {'output_dir': 'run', 'seed': 3,
            'corpus': {'toy': TOY_SPEC},
            'attribution': {'epochs': 2, 'hidden_size': 32, 'embedding_dim': 32, 'ig_steps': 10},
            'smlm': {'layers': 1, 'heads': 2, 'dim': 32, 'ff_dim': 64, 'max_len': 16, 'bootstrap_epochs': 1, 'lr': 1e-3, 'batch_size': 32},
            'eval': {'classifier_epochs': 1, 'max_examples': 20, 'qualitative': 2}}


def _write_config(run_dir, **changes):
    os.makedirs(run_dir, exist_ok=True)
    fn = os.path.join(run_dir, 'run.yaml')
    with open(fn, 'w') as fh:
        yaml.safe_dump({**TINY_RUN, **changes}, fh)
    return fn


def _starts(run_dir):
    return [rec['stage'] for rec in read_jsonl(os.path.join(run_dir, 'run', MANIFEST)) if rec['event'] == 'start']


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp('pipeline'))
    config = _write_config(run_dir)
    return run_dir, config, main(['pipeline', '--config', config])


@pytest.mark.dependency()
def test_pipeline(pipeline_run):
    run_dir, _, exit_code = pipeline_run
    assert exit_code == 0
    out = os.path.join(run_dir, 'run')
    with open(os.path.join(out, 'report', 'eval.json')) as fh:
        rows = json.load(fh)
    assert [row['index'] for row in rows] == ['SMLM', 'SMLM-FT']
    for row in rows:
        assert 0 <= row['TST%'] <= 100 and row['n'] == 20
    for artifact in ('corpus', 'vocab.json', 'attribution', 'masked', 'smlm-bootstrap', 'smlm', 'transfer', 'eval-classifier'):
        assert os.path.exists(os.path.join(out, artifact)), f'missing {artifact}'
    assert not os.path.exists(os.path.join(out, LOCK)), 'the lock is released after the run'


@pytest.mark.dependency(depends=['test_pipeline'])
def test_resume(pipeline_run):
    run_dir, config, _ = pipeline_run
    before = _starts(run_dir)
    assert main(['eval', '--config', config]) == 0
    assert _starts(run_dir) == before, 'completed stages must not be run again'


@pytest.mark.dependency(depends=['test_pipeline'])
def test_changed_settings(pipeline_run, tmp_path):
    run_dir, _, _ = pipeline_run
    copy_dir = str(tmp_path / 'copy')
    shutil.copytree(run_dir, copy_dir)
    config = _write_config(copy_dir, eval={**TINY_RUN['eval'], 'qualitative': 1})
    before = _starts(copy_dir)
    assert main(['eval', '--config', config]) == 0
    assert _starts(copy_dir)[len(before):] == ['eval'], 'only the affected stage is run again'


@pytest.mark.dependency(depends=['test_pipeline'])
def test_corrupted_artifact(pipeline_run, tmp_path, caplog):
    run_dir, _, _ = pipeline_run
    copy_dir = str(tmp_path / 'copy')
    shutil.copytree(run_dir, copy_dir)
    with open(os.path.join(copy_dir, 'run', 'masked', 'train.tsv'), 'a') as fh:
        fh.write('0\tinjected\t\n')
    with caplog.at_level(logging.ERROR):
        assert main(['pipeline', '--config', os.path.join(copy_dir, 'run.yaml')]) == 2
    assert 'mask/train' in caplog.text


@pytest.mark.dependency(depends=['test_pipeline'])
def test_compare_attr(pipeline_run):
    run_dir, config, _ = pipeline_run
    assert main(['compare-attr', '--config', config]) == 0
    with open(os.path.join(run_dir, 'run', 'report', 'compare_attr.json')) as fh:
        rows = json.load(fh)
    assert {row['method'] for row in rows} == {'VA', 'EA', 'VG', 'GxX', 'IG', 'No Masking'}


@pytest.mark.dependency(depends=['test_pipeline'])
def test_sweep(pipeline_run):
    run_dir, config, _ = pipeline_run
    assert main(['sweep', '--config', config, '--grid', '0,0.15,0.3,0.5,1']) == 0
    with open(os.path.join(run_dir, 'run', 'report', 'sweep.csv')) as fh:
        lines = fh.readlines()
    assert lines[0].strip() == 'lambda_eps,acc_percent,s_bleu_masked,mask_rate'
    assert len(lines) == 6
    assert os.path.exists(os.path.join(run_dir, 'run', 'report', 'sweep.png'))
    assert main(['sweep', '--config', config, '--grid', '0.5,0.1']) == 1


@pytest.mark.dependency(depends=['test_compare_attr', 'test_sweep'])
def test_artifacts_in_manifest(pipeline_run):
    run_dir, config, _ = pipeline_run
    assert main(['--plot_type', 'pdf', 'sweep', '--config', config]) == 0
    out = os.path.join(run_dir, 'run')
    assert os.path.exists(os.path.join(out, 'report', 'sweep.pdf'))
    assert not os.path.exists(os.path.join(out, 'report', 'sweep.png')), 'the figure of the earlier sweep is replaced'
    artifacts = RunManifest(out).artifacts()
    assert 'report/compare_attr.json' in artifacts and 'report/sweep.csv' in artifacts
    orphans = []
    for root, _, files in os.walk(out):
        for fn in files:
            rel = os.path.relpath(os.path.join(root, fn), out)
            if rel != MANIFEST and not any(rel == a or rel.startswith(a + os.sep) for a in artifacts):
                orphans.append(rel)
    assert not orphans, f'files not recorded in the manifest: {orphans}'


@pytest.mark.dependency(depends=['test_pipeline'])
def test_transfer(pipeline_run, tmp_path):
    run_dir, _, _ = pipeline_run
    out = os.path.join(run_dir, 'run')
    with open(os.path.join(out, 'corpus', 'test.tsv')) as fh:
        lines = fh.readlines()[:7]
    with open(tmp_path / 'input.tsv', 'w') as fh:
        fh.writelines(lines)
    args = ['transfer', '--model_dir', os.path.join(out, 'smlm'), '--attr_dir', os.path.join(out, 'attribution'), '--dst', 'positive']
    assert main(args + ['--input', str(tmp_path / 'input.tsv'), '--out', str(tmp_path / 'output.txt')]) == 0
    with open(tmp_path / 'output.txt') as fh:
        outputs = fh.read().splitlines()
    assert len(outputs) == 7
    for line, output in zip(lines, outputs):
        assert len(output.split(' ')) == len(line.rstrip('\n').split('\t')[1].split(' '))
    open(tmp_path / 'empty.tsv', 'w').close()
    assert main(args + ['--input', str(tmp_path / 'empty.tsv'), '--out', str(tmp_path / 'empty.txt')]) == 0
    assert os.path.getsize(tmp_path / 'empty.txt') == 0
    assert main(args[:-1] + ['neutral', '--input', str(tmp_path / 'input.tsv'), '--out', str(tmp_path / 'x.txt')]) == 1


@pytest.mark.dependency(depends=['test_pipeline'])
def test_determinism(pipeline_run, tmp_path):
    run_dir, _, _ = pipeline_run
    config = _write_config(str(tmp_path))
    assert main(['pipeline', '--config', config]) == 0
    with open(os.path.join(run_dir, 'run', 'report', 'eval.json')) as fh1, open(tmp_path / 'run' / 'report' / 'eval.json') as fh2:
        assert json.load(fh1) == json.load(fh2), 'the same config and seed must give the same results'


def test_gen_toy(tmp_path, caplog):
    for name in ('a', 'b'):
        assert main(['gen-toy', '--spec', TOY_SPEC, '--out', str(tmp_path / name)]) == 0
    for fn in ('train.tsv', 'dev.tsv', 'test.tsv', 'labels.txt', 'planted.tsv'):
        assert sha256_path(tmp_path / 'a' / fn) == sha256_path(tmp_path / 'b' / fn), f'{fn} differs between runs'
    with open(TOY_SPEC) as fh:
        spec = yaml.safe_load(fh)
    del spec['lexicons']['positive']
    with open(tmp_path / 'broken.yaml', 'w') as fh:
        yaml.safe_dump(spec, fh)
    with caplog.at_level(logging.ERROR):
        assert main(['gen-toy', '--spec', str(tmp_path / 'broken.yaml'), '--out', str(tmp_path / 'c')]) == 1
    assert 'lexicons.' in caplog.text


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(['no-such-command'])
    assert e.value.code == 1
    assert main(['pipeline', '--config', str(tmp_path / 'missing.yaml')]) == 1


def test_run_lock(tmp_path):
    out = str(tmp_path / 'run')
    os.makedirs(out)
    with open(os.path.join(out, LOCK), 'w') as fh:
        fh.write('99999999')
    with run_lock(out) as fn:
        with open(fn) as fh:
            assert int(fh.read()) == os.getpid()
    assert not os.path.exists(os.path.join(out, LOCK))
    with open(os.path.join(out, LOCK), 'w') as fh:
        fh.write(str(os.getpid()))
    with pytest.raises(RuntimeError, match='locked'):
        with run_lock(out):
            pass

"""Worked examples quoted from the method's published walkthrough, as mock fixtures."""

from __future__ import annotations

import json
import re
from pathlib import Path

from refeval.llm import PlaybookRule, save_playbook
from refeval.prompts import (
    EXTRACT_TASK,
    JUDGE_EXTRACT_TASK,
    JWOR_TASK,
    QUESTION_TASK,
    VERDICT_TASK,
)

# -- extraction walkthrough (drama series passage) ------------------------------

DRAMA_PASSAGE = (
    "lastaired = ' ' Sa Sandaling Kailangan Mo Ako ' ' ( lit . ' ' The Moment You Need Me ' ' ) is a "
    "Philippine drama series aired on ABS-CBN in 1998-2001 . It starred some of the Philippines ' renowned "
    "veteran actors and actresses combined with promising young artists under the direction of the reputable "
    "Filipino TV and movie director , Olivia M. Lamasan . This shows the intricacies of love , friendship , "
    "betrayal and forgiveness. # Cast # *Marvin Agustin as Ruben *Kristine Hermosa as Agnes *Piolo Pascual as "
    "Raffy *Giselle Toengi as Stella *John Lloyd Cruz as Daniel *Kaye Abad as Eloisa *Dante Rivero *Hilda "
    "Koronel *Ronaldo Valdez *Tessie Tomas *Tracy Vergel *William Lorenzo # See also # *List of programs "
    "broadcast by ABS-CBN *List of programs aired by ABS-CBN *List of telenovelas of ABS-CBN"
)
DRAMA_KEYWORD = "Sa Sandaling Kailangan Mo Ako"
DRAMA_DESCRIPTION = "A Philippine drama series aired on ABS-CBN from 1998-2001, directed by Olivia M. Lamasan."
# the published output lists bare fields without braces
DRAMA_EXTRACTION_REPLY = (
    '"type": "Factual Knowledge",\n'
    f'"keyword": "{DRAMA_KEYWORD}",\n'
    f'"description": "{DRAMA_DESCRIPTION}"'
)

# -- judging walkthrough (JavaBeans answer against an EJB reference) --------------

JAVA_UNIT_KEYWORD = "Java Bean"
JAVA_UNIT_DESCRIPTION = "A reusable software component that encapsulates many objects into one object for easy maintenance."
JAVA_ANSWER = (
    "In Java, inheritance is a mechanism where one class acquires the properties (methods and fields) of another "
    "class. The child class extends the parent class, and it can use all the public and protected methods and "
    "fields of the parent. On the other hand, implementing an interface provides a way for a class to become "
    "more formal about the behavior it promises to provide. It specifies a set of methods that the class must "
    "implement. Unlike inheritance, a class can implement multiple interfaces, but it can only extend one class.  "
    "The 'javap' command in Java is used to print information about the classes and interfaces in a given Java "
    "binary file. It displays the package, protected, and public fields and methods of the classes available in "
    "the specified file. JavaBeans are reusable software components that adhere to specific naming conventions "
    "for properties, methods, and events. They provide a way to encapsulate state and behavior within an object. "
    "Singleton and prototype bean scopes are used in Spring to control the lifecycle of objects. Singleton beans "
    "are created only once per container, while prototype beans are created every time they are requested.  "
    "Thread creation in Java can be achieved by either extending the Thread class or implementing the Runnable "
    "interface. Interrupting a thread is done by calling the interrupt() method of the thread object. Calling "
    "join() on a thread waits for it to complete before moving on to the next task. Thread-safety "
    "considerations are important when dealing with singleton patterns because multiple threads may access the "
    "same instance concurrently.  In addition to these topics, I have knowledge of other Java concepts such as "
    "generics, collections, exception handling, JDBC, JPA, Hibernate, Servlets, JSP, RESTful web services, "
    "Spring Framework, and more."
)
JAVA_RELATED = (
    "JavaBeans are reusable software components that adhere to specific naming conventions for properties, "
    "methods, and events. They provide a way to encapsulate state and behavior within an object. Singleton and "
    "prototype bean scopes are used in Spring to control the lifecycle of objects. Singleton beans are created "
    "only once per container, while prototype beans are created every time they are requested."
)
JAVA_REFERENCE = ("Singleton scope should be used together with EJB stateless session bean, and prototype scope "
                  "should be used together with EJB stateful session bean.")
JAVA_REASON = ("The candidate incorrectly associates singleton and prototype bean scopes with Spring, while the "
               "reference text specifically mentions their use with EJB (Enterprise JavaBeans) stateless and "
               "stateful session beans, not Spring.")


def walkthrough_rules() -> list[PlaybookRule]:
    esc = re.escape
    return [
        PlaybookRule("regex", f"{esc(EXTRACT_TASK)}.*Sa Sandaling Kailangan Mo Ako", DRAMA_EXTRACTION_REPLY),
        PlaybookRule("regex", f"{esc(JUDGE_EXTRACT_TASK)}\n.*KNOWLEDGE UNIT: {esc(JAVA_UNIT_KEYWORD)}:",
                     JAVA_RELATED),
        PlaybookRule("regex", f"{esc(VERDICT_TASK)}.*REFERENCE:\n{esc(JAVA_REFERENCE)}",
                     json.dumps({"type": "incorrect", "reason": JAVA_REASON})),
    ]


# -- reference contradicting world knowledge ---------------------------------------

STONES_REFERENCE = ("The Silent Holy Stones was nominated in the Best Director category in the 2005 Beijing "
                    "College Student Film Festival.")
STONES_KEYWORD = "The Silent Holy Stones"
STONES_DESCRIPTION = ("The Silent Holy Stones was nominated in the Best Director category at the 2005 Beijing "
                      "College Student Film Festival.")
STONES_QUESTION = "What was the Silent Holy Stones' director award in 2005?"
STONES_ANSWER = ("Directed by Pema Tseden, won the Golden Rooster Award for Best Directorial Debut in 2005, "
                 "marking a significant step for Tibetan cinema.")
STONES_REASON = ("The reference only reports a Best Director nomination at the 2005 Beijing College Student "
                 "Film Festival, not a Golden Rooster award.")


def uncommon_rules() -> list[PlaybookRule]:
    esc = re.escape
    unit = json.dumps({"type": "Factual Knowledge", "keyword": STONES_KEYWORD, "description": STONES_DESCRIPTION})
    return [
        PlaybookRule("regex", f"{esc(EXTRACT_TASK)}.*Silent Holy Stones", f"```jsonl\n{unit}\n```"),
        PlaybookRule("regex", f"{esc(QUESTION_TASK)}.*Silent Holy Stones", STONES_QUESTION),
        PlaybookRule("regex", f"{esc(JUDGE_EXTRACT_TASK)}\n.*Golden Rooster", STONES_ANSWER),
        PlaybookRule("substring", JUDGE_EXTRACT_TASK + "\n", "NONE"),
        PlaybookRule("regex", f"{esc(VERDICT_TASK)}.*CANDIDATE:\n.*Golden Rooster",
                     json.dumps({"type": "incorrect", "reason": STONES_REASON})),
        # the judge without a reference goes by its own knowledge of the film
        PlaybookRule("substring", JWOR_TASK + "\n",
                     json.dumps({"type": "correct", "reason": "Pema Tseden did win that award in 2005."})),
        PlaybookRule("substring", STONES_QUESTION, STONES_ANSWER),
    ]


def write_uncommon_case(root: Path) -> Path:
    (root / "corpus").mkdir(parents=True, exist_ok=True)
    (root / "corpus" / "silent_holy_stones.txt").write_text(STONES_REFERENCE + "\n", encoding="utf-8")
    save_playbook(root / "playbook.jsonl", uncommon_rules())
    cfg = {"corpus": "corpus", "run_dir": "run", "backend": "mock", "playbook": "playbook.jsonl"}
    path = root / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
